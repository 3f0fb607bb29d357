//! Frame-wise multi-head self-attention (MSA), the multi-head
//! self/cross-attention (MSCA) family, and TokenShift's class-token shift.
//!
//! Every function here works on `[T, N+1, D]` tensors recorded on a
//! [`Tape`]: `T` frames, `N` patch tokens plus one class token per frame,
//! and `D` channels split into `h` heads of width `D/h`.
//!
//! MSA attends within each frame only. MSCA computes the same per-frame
//! projections, then replaces a slice of the queries, keys and/or values
//! with the matching slice from frame `t − 1` or `t + 1` before attention.
//! The slice is a group of heads ([`ShiftAxis::Head`]) or a group of token
//! rows ([`ShiftAxis::Patch`]). Shifting moves data without arithmetic, so
//! every variant costs exactly as many multiply-adds as MSA (see
//! [`attention_flops`]).

mod shift;

use serde::{Deserialize, Serialize};

pub use shift::{
    shift_along, temporal_shift_heads, temporal_shift_patches, token_shift, QkvSet, ShiftAxis,
    ShiftConfig, ShiftTargets, Variant,
};

use crate::error::{Error, Result};
use crate::flops::FlopReport;
use crate::tensor::{Tape, Tensor, Var};

/// Divisor applied to attention scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `1/√D`, with `D` the full model width.
    #[default]
    ModelDim,
    /// `1/√(D/h)`, the usual per-head scaling.
    HeadDim,
}

impl ScaleMode {
    pub fn factor(self, dim: usize, heads: usize) -> f64 {
        match self {
            ScaleMode::ModelDim => 1.0 / (dim as f64).sqrt(),
            ScaleMode::HeadDim => 1.0 / ((dim / heads) as f64).sqrt(),
        }
    }
}

/// Projection weights of one attention module. `P` is [`Tensor`] for
/// stored parameters and [`Var`] once registered on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<P> {
    pub heads: usize,
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub b_q: Option<P>,
    pub b_k: Option<P>,
    pub b_v: Option<P>,
    pub w_o: Option<P>,
    pub b_o: Option<P>,
}

impl<P> AttentionParams<P> {
    /// Present tensors with their field names, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &P)> {
        let mut out = vec![("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)];
        let optional = [
            ("b_q", &self.b_q),
            ("b_k", &self.b_k),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ];
        out.extend(
            optional
                .into_iter()
                .filter_map(|(n, p)| p.as_ref().map(|p| (n, p))),
        );
        out
    }

    /// Mutable counterpart of [`AttentionParams::named`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.w_q, &mut self.w_k, &mut self.w_v];
        for p in [
            &mut self.b_q,
            &mut self.b_k,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
        ] {
            if let Some(p) = p.as_mut() {
                out.push(p);
            }
        }
        out
    }

    pub fn try_map<Q, E>(
        &self,
        f: &mut impl FnMut(&P) -> Result<Q, E>,
    ) -> Result<AttentionParams<Q>, E> {
        Ok(AttentionParams {
            heads: self.heads,
            w_q: f(&self.w_q)?,
            w_k: f(&self.w_k)?,
            w_v: f(&self.w_v)?,
            b_q: map_opt(&self.b_q, f)?,
            b_k: map_opt(&self.b_k, f)?,
            b_v: map_opt(&self.b_v, f)?,
            w_o: map_opt(&self.w_o, f)?,
            b_o: map_opt(&self.b_o, f)?,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> AttentionParams<Q> {
        self.try_map(&mut |p| Ok::<_, std::convert::Infallible>(f(p)))
            .unwrap_or_else(|e| match e {})
    }
}

pub(crate) fn map_opt<P, Q, E>(
    p: &Option<P>,
    f: &mut impl FnMut(&P) -> Result<Q, E>,
) -> Result<Option<Q>, E> {
    p.as_ref().map(f).transpose()
}

impl AttentionParams<Tensor> {
    /// Identity projections, no biases, no output projection.
    pub fn identity(dim: usize, heads: usize) -> Self {
        let eye = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        AttentionParams {
            heads,
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye,
            b_q: None,
            b_k: None,
            b_v: None,
            w_o: None,
            b_o: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Records every tensor on `tape` as a tracked leaf.
    pub fn register(&self, tape: &mut Tape) -> AttentionParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }

    /// Records every tensor on `tape` as a constant.
    pub fn register_constant(&self, tape: &mut Tape) -> AttentionParams<Var> {
        self.map(|t| tape.constant(t.clone()))
    }
}

fn check_input(tape: &Tape, z: Var, p: &AttentionParams<Var>) -> Result<(usize, usize, usize)> {
    let zs = tape.value(z).shape();
    let d = tape.value(p.w_q).shape()[0];
    match *zs {
        [t, r, dim] if dim == d => {
            if p.heads == 0 || !d.is_multiple_of(p.heads) {
                return Err(Error::config(format!(
                    "dim {d} not divisible by {} heads",
                    p.heads
                )));
            }
            Ok((t, r, dim))
        }
        _ => Err(Error::Dimension {
            op: "attention",
            lhs: zs.to_vec(),
            rhs: tape.value(p.w_q).shape().to_vec(),
        }),
    }
}

/// Per-frame projections `Q = z W_q + b_q`, and likewise for `K`, `V`.
pub fn qkv_project(tape: &mut Tape, z: Var, p: &AttentionParams<Var>) -> Result<(Var, Var, Var)> {
    check_input(tape, z, p)?;
    let q = tape.linear(z, p.w_q, p.b_q)?;
    let k = tape.linear(z, p.w_k, p.b_k)?;
    let v = tape.linear(z, p.w_v, p.b_v)?;
    Ok((q, k, v))
}

/// Per-head attention outputs and the attention weights behind them.
pub struct HeadAttention {
    /// `[T, N+1, D]`: heads concatenated along channels, before any
    /// output projection.
    pub output: Var,
    /// `[T·h, N+1, N+1]`: one row-stochastic matrix per frame and head.
    pub weights: Var,
}

/// `head_i = softmax(Q_i K_iᵀ · scale) V_i` for every frame and head.
pub fn head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: ScaleMode,
) -> Result<HeadAttention> {
    let (t, r, d) = match *tape.value(q).shape() {
        [t, r, d] => (t, r, d),
        ref s => {
            return Err(Error::Dimension {
                op: "head_attention",
                lhs: s.to_vec(),
                rhs: vec![],
            })
        }
    };
    for x in [k, v] {
        if tape.value(x).shape() != [t, r, d] {
            return Err(Error::Dimension {
                op: "head_attention",
                lhs: vec![t, r, d],
                rhs: tape.value(x).shape().to_vec(),
            });
        }
    }
    let w = d / heads;
    let mut split = |x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[t, r, heads, w])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[t * heads, r, w])
    };
    let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
    let scores = tape.batch_matmul(qh, kh, true)?;
    let scores = tape.scale(scores, scale.factor(d, heads));
    let weights = tape.softmax_lastdim(scores)?;
    let out = tape.batch_matmul(weights, vh, false)?;
    let out = tape.reshape(out, &[t, heads, r, w])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let output = tape.reshape(out, &[t, r, d])?;
    Ok(HeadAttention { output, weights })
}

/// Applies `W_o`, `b_o` when present.
pub fn project_out(tape: &mut Tape, heads_out: Var, p: &AttentionParams<Var>) -> Result<Var> {
    match p.w_o {
        Some(w) => tape.linear(heads_out, w, p.b_o),
        None => match p.b_o {
            Some(b) => tape.add_broadcast(heads_out, b),
            None => Ok(heads_out),
        },
    }
}

/// Frame-wise MSA: attention within each frame, heads concatenated, then
/// the output projection. No data crosses frames.
pub fn msa_forward(
    tape: &mut Tape,
    z: Var,
    p: &AttentionParams<Var>,
    scale: ScaleMode,
) -> Result<Var> {
    let (q, k, v) = qkv_project(tape, z, p)?;
    let att = head_attention(tape, q, k, v, p.heads, scale)?;
    project_out(tape, att.output, p)
}

/// MSCA: per-frame projections, a temporal shift of the tensors named in
/// `shift.targets` along `shift.axis`, then per-frame attention as in
/// [`msa_forward`].
pub fn msca_forward(
    tape: &mut Tape,
    z: Var,
    p: &AttentionParams<Var>,
    shift: &ShiftConfig,
    scale: ScaleMode,
) -> Result<Var> {
    let att = msca_heads(tape, z, p, shift, scale)?;
    project_out(tape, att.output, p)
}

/// [`msca_forward`] stopped before the output projection.
pub fn msca_heads(
    tape: &mut Tape,
    z: Var,
    p: &AttentionParams<Var>,
    shift: &ShiftConfig,
    scale: ScaleMode,
) -> Result<HeadAttention> {
    let ShiftTargets::Attention(targets) = shift.targets else {
        return Err(Error::config("MSCA needs q/k/v shift targets"));
    };
    if shift.axis == ShiftAxis::FeatureChannel {
        return Err(Error::config("MSCA shifts along heads or patches"));
    }
    let (_, tokens, dim) = check_input(tape, z, p)?;
    shift.validate(p.heads, tokens, dim)?;
    let (mut q, mut k, mut v) = qkv_project(tape, z, p)?;
    for (on, x) in [
        (targets.q, &mut q),
        (targets.k, &mut k),
        (targets.v, &mut v),
    ] {
        if on {
            *x = shift_along(tape, *x, shift, p.heads)?;
        }
    }
    head_attention(tape, q, k, v, p.heads, scale)
}

/// Attention module kinds that the FLOP accountant distinguishes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Msa,
    Msca,
    TokenShiftMsa,
}

impl From<Variant> for AttentionKind {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Msa => AttentionKind::Msa,
            Variant::TokenShift => AttentionKind::TokenShiftMsa,
            Variant::Msca { .. } => AttentionKind::Msca,
        }
    }
}

/// Multiply-adds of one attention module over a `T`-frame clip with `n`
/// patches (so `n + 1` tokens), width `d` and `h` heads.
///
/// Shifts are index moves, so `kind` does not change any count.
pub fn attention_flops(_kind: AttentionKind, t: usize, n: usize, d: usize, h: usize) -> FlopReport {
    let (t, r, d, h) = (t as u64, n as u64 + 1, d as u64, h as u64);
    let per_head = d / h;
    FlopReport::new(
        3 * t * r * d * d,
        t * h * r * r * per_head,
        t * h * r * r * per_head,
        t * r * d * d,
        0,
        0,
        0,
    )
}
