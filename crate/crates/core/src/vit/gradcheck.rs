use super::{model_forward, Model, ModelConfig};
use crate::attention::{ShiftAxis, Variant};
use crate::error::Result;
use crate::tensor::Boundary;
use crate::tensor::{finite_diff, max_relative_error, relative_error, Tape, Tensor};

/// Finite-difference result for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    /// Largest elementwise `|a − n| / (|n| + 1e-8)`.
    pub max_rel_err: f64,
    /// Largest `|a|` and `|n|`, to tell real gradients from null ones.
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    /// The loss does not depend on this tensor at all; see
    /// [`key_bias_is_null`].
    pub null_direction: bool,
    /// Elements that miss [`GRAD_REL_TOL`] and also differ by more than
    /// [`FD_RESOLUTION`] in absolute terms.
    pub unresolved: usize,
}

/// Relative-error bound for ordinary parameters.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Bound on `|a|` for a null direction.
pub const NULL_ANALYTIC_TOL: f64 = 1e-12;
/// Bound on `|n|` for a null direction: a few ulps of an O(1) loss over 2ε.
pub const NULL_NUMERIC_TOL: f64 = 1e-10;
/// Smallest gradient difference central differences at ε = 1e-5 resolve
/// on an O(1) loss: one ulp of the loss is about 1.1e-16, over 2ε that
/// is 5.5e-12, with a margin for a few ulps.
pub const FD_RESOLUTION: f64 = 1e-10;

impl ParamCheck {
    pub fn passed(&self) -> bool {
        if self.null_direction {
            self.max_abs_analytic <= NULL_ANALYTIC_TOL && self.max_abs_numeric <= NULL_NUMERIC_TOL
        } else {
            self.max_rel_err < GRAD_REL_TOL
        }
    }

    /// Like [`ParamCheck::passed`], but elements whose mismatch is below
    /// [`FD_RESOLUTION`] count as agreeing.
    pub fn passed_to_resolution(&self) -> bool {
        self.passed() || (!self.null_direction && self.unresolved == 0)
    }
}

/// Whether block `i`'s key bias cannot affect the loss.
///
/// `b_k` adds `q·b_k` to every score in a row, which softmax ignores, as
/// long as each key row still carries its bias. Only a patch-axis key
/// shift with zero fill breaks that, by moving bias-free zero rows in.
pub fn key_bias_is_null(cfg: &ModelConfig, i: usize) -> bool {
    match cfg.block_kinds[i] {
        Variant::Msca {
            targets,
            axis: ShiftAxis::Patch,
        } => {
            !(targets.k
                && cfg.shift.boundary == Boundary::Zero
                && cfg.shift.back + cfg.shift.fwd > 0)
        }
        _ => true,
    }
}

fn is_null(cfg: &ModelConfig, name: &str) -> bool {
    let Some(rest) = name.strip_prefix("blocks.") else {
        return false;
    };
    match rest.split_once('.') {
        Some((i, "attn.b_k")) => i.parse().is_ok_and(|i| key_bias_is_null(cfg, i)),
        _ => false,
    }
}

/// Compares backprop gradients of the cross-entropy of `clip` against
/// central differences with step `eps`, one parameter tensor at a time.
pub fn gradient_check(
    model: &Model,
    clip: &Tensor,
    label: usize,
    eps: f64,
) -> Result<Vec<ParamCheck>> {
    let analytic = model.loss_and_grads(clip, label)?.grads;
    let loss_with = |i: usize, t: &Tensor| -> Result<f64> {
        let mut params = model.params.clone();
        *params.tensors_mut()[i] = t.clone();
        let mut tape = Tape::new();
        let p = params.register_constant(&mut tape);
        let out = model_forward(&mut tape, clip, &model.config, &p)?;
        let l = tape.cross_entropy(out.logits, label)?;
        Ok(tape.value(l).item())
    };
    let mut report = Vec::new();
    let named = model.params.named();
    for (i, ((name, param), g)) in named.into_iter().zip(analytic.tensors()).enumerate() {
        let mut failure = None;
        let numeric = finite_diff(
            |t| match loss_with(i, t) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            param,
            eps,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let max_abs = |t: &Tensor| t.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        report.push(ParamCheck {
            max_rel_err: max_relative_error(g, &numeric),
            max_abs_analytic: max_abs(g),
            max_abs_numeric: max_abs(&numeric),
            null_direction: is_null(&model.config, &name),
            unresolved: g
                .data()
                .iter()
                .zip(numeric.data())
                .filter(|&(&a, &n)| {
                    relative_error(a, n) >= GRAD_REL_TOL && (a - n).abs() > FD_RESOLUTION
                })
                .count(),
            name,
        });
    }
    Ok(report)
}
