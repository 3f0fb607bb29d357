//! Frame-wise video transformer: patch embedding, a stack of encoder
//! blocks (MSA, TokenShift or MSCA, chosen per block), final layer norm,
//! temporal averaging of the class token and a linear head.

mod checkpoint;
mod config;
mod gradcheck;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST};
pub use config::{AttentionOptions, ModelConfig, ShiftAmounts, CHANNELS};
pub use gradcheck::{
    gradient_check, key_bias_is_null, ParamCheck, FD_RESOLUTION, GRAD_REL_TOL, NULL_ANALYTIC_TOL,
    NULL_NUMERIC_TOL,
};
pub use params::{init_params, BlockParams, ModelParams, INIT_STD};

use crate::attention::{msa_forward, msca_forward, token_shift, ShiftTargets, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};

fn clip_dims(clip: &Tensor, patch: usize) -> Result<(usize, usize, usize)> {
    let [t, c, h, w] = *clip.shape() else {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: clip.shape().to_vec(),
            rhs: vec![],
        });
    };
    if c != CHANNELS {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: clip.shape().to_vec(),
            rhs: vec![t, CHANNELS, h, w],
        });
    }
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "frame {h}x{w} not divisible by patch {patch}"
        )));
    }
    Ok((t, h, w))
}

/// `[T, 3, H, W]` → `[T, N, 3P²]`. Patches run row-major from the top-left;
/// each is flattened channel-major, then row, then column.
pub fn patchify(clip: &Tensor, patch: usize) -> Result<Tensor> {
    let (t, h, w) = clip_dims(clip, patch)?;
    let (ph, pw) = (h / patch, w / patch);
    let d = CHANNELS * patch * patch;
    let mut out = Vec::with_capacity(clip.numel());
    let src = clip.data();
    for f in 0..t {
        for py in 0..ph {
            for px in 0..pw {
                for c in 0..CHANNELS {
                    for y in 0..patch {
                        let row = ((f * CHANNELS + c) * h + py * patch + y) * w + px * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![t, ph * pw, d], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch: usize, height: usize, width: usize) -> Result<Tensor> {
    let t = patches.shape().first().copied().unwrap_or(0);
    let mut clip = Tensor::zeros(&[t, CHANNELS, height, width]);
    clip_dims(&clip, patch)?;
    let n = (height / patch) * (width / patch);
    if patches.shape() != [t, n, CHANNELS * patch * patch] {
        return Err(Error::Dimension {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![t, n, CHANNELS * patch * patch],
        });
    }
    let pw = width / patch;
    let mut src = patches.data().chunks_exact(patch);
    let dst = clip.data_mut();
    for f in 0..t {
        for p in 0..n {
            let (py, px) = (p / pw, p % pw);
            for c in 0..CHANNELS {
                for y in 0..patch {
                    let row = ((f * CHANNELS + c) * height + py * patch + y) * width + px * patch;
                    dst[row..row + patch].copy_from_slice(src.next().unwrap());
                }
            }
        }
    }
    Ok(clip)
}

/// `z₀ = [c₀, x E] + E_pos` per frame: `[T, N, d]` → `[T, N+1, D]`.
pub fn embed(tape: &mut Tape, patches: Var, p: &ModelParams<Var>) -> Result<Var> {
    let t = tape.value(patches).shape()[0];
    let d = tape.value(p.cls_token).numel();
    let x = tape.linear(patches, p.patch_embed, None)?;
    let cls = tape.reshape(p.cls_token, &[1, d])?;
    let cls = tape.tile_leading(cls, t)?;
    let z = tape.concat(&[cls, x], 1)?;
    tape.add_broadcast(z, p.pos_embed)
}

fn mlp(tape: &mut Tape, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let h = tape.linear(x, p.mlp_w1, Some(p.mlp_b1))?;
    let h = tape.gelu(h);
    tape.linear(h, p.mlp_w2, Some(p.mlp_b2))
}

/// One pre-norm encoder block of kind `kind`. The shift amounts are read
/// from `cfg`.
pub fn encoder_block(
    tape: &mut Tape,
    z: Var,
    kind: Variant,
    p: &BlockParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let eps = cfg.ln_eps;
    let scale = cfg.attention.scale;
    let shift = kind.shift_config(cfg.shift.back, cfg.shift.fwd, cfg.shift.boundary);
    let attn_in = |tape: &mut Tape, z: Var| tape.layer_norm(z, p.ln1_gamma, p.ln1_beta, eps);
    let z = match (kind, shift) {
        (Variant::Msa, _) => {
            let a = attn_in(tape, z)?;
            let a = msa_forward(tape, a, &p.attn, scale)?;
            tape.add(a, z)?
        }
        (Variant::TokenShift, Some(s)) if s.targets == ShiftTargets::ClassTokenChannels => {
            let z = token_shift(tape, z, s.back, s.fwd, s.boundary)?;
            let a = attn_in(tape, z)?;
            let a = msa_forward(tape, a, &p.attn, scale)?;
            let z = tape.add(a, z)?;
            token_shift(tape, z, s.back, s.fwd, s.boundary)?
        }
        (Variant::Msca { .. }, Some(s)) => {
            let a = attn_in(tape, z)?;
            let a = msca_forward(tape, a, &p.attn, &s, scale)?;
            tape.add(a, z)?
        }
        _ => return Err(Error::config(format!("no block for kind {kind}"))),
    };
    let m = tape.layer_norm(z, p.ln2_gamma, p.ln2_beta, eps)?;
    let m = mlp(tape, m, p)?;
    tape.add(m, z)
}

/// Everything a forward pass records.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[classes]`.
    pub logits: Var,
    /// `[T, D]`: per-frame class-token features after the final layer
    /// norm, before temporal averaging.
    pub frame_features: Var,
    /// `[T, N+1, D]`: output of the last block.
    pub tokens: Var,
}

/// Full forward pass of one `[T, 3, H, W]` clip.
pub fn model_forward(
    tape: &mut Tape,
    clip: &Tensor,
    cfg: &ModelConfig,
    p: &ModelParams<Var>,
) -> Result<Forward> {
    let want = [cfg.frames, CHANNELS, cfg.height, cfg.width];
    if clip.shape() != want {
        return Err(Error::Dimension {
            op: "model_forward",
            lhs: clip.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    if p.blocks.len() != cfg.depth {
        return Err(Error::config(format!(
            "{} blocks for depth {}",
            p.blocks.len(),
            cfg.depth
        )));
    }
    let patches = tape.constant(patchify(clip, cfg.patch)?);
    let mut z = embed(tape, patches, p)?;
    for (kind, bp) in cfg.block_kinds.iter().zip(&p.blocks) {
        z = encoder_block(tape, z, *kind, bp, cfg)?;
    }
    let tokens = z;
    let cls = tape.slice(z, 1, 0, 1)?;
    let cls = tape.reshape(cls, &[cfg.frames, cfg.dim])?;
    let frame_features = tape.layer_norm(cls, p.final_ln_gamma, p.final_ln_beta, cfg.ln_eps)?;
    let pooled = tape.mean_over_axis(frame_features, 0)?;
    let pooled = tape.reshape(pooled, &[1, cfg.dim])?;
    let logits = tape.linear(pooled, p.head_w, Some(p.head_b))?;
    let logits = tape.reshape(logits, &[cfg.classes])?;
    Ok(Forward {
        logits,
        frame_features,
        tokens,
    })
}

/// A configuration paired with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor>,
}

impl Model {
    /// Fresh model with weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config, config.seed)?;
        Ok(Model { config, params })
    }

    /// Logits for one clip.
    pub fn logits(&self, clip: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.register_constant(&mut tape);
        let out = model_forward(&mut tape, clip, &self.config, &p)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Softmax class probabilities for one clip.
    pub fn probabilities(&self, clip: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.register_constant(&mut tape);
        let out = model_forward(&mut tape, clip, &self.config, &p)?;
        let probs = tape.softmax_lastdim(out.logits)?;
        Ok(tape.value(probs).clone())
    }

    /// Per-frame class features, `[T, D]`.
    pub fn frame_features(&self, clip: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.register_constant(&mut tape);
        let out = model_forward(&mut tape, clip, &self.config, &p)?;
        Ok(tape.value(out.frame_features).clone())
    }

    /// Cross-entropy of one clip against `label`, with the logits and the
    /// gradient of every parameter.
    pub fn loss_and_grads(&self, clip: &Tensor, label: usize) -> Result<SampleGrad> {
        let mut tape = Tape::new();
        let p = self.params.register(&mut tape);
        let out = model_forward(&mut tape, clip, &self.config, &p)?;
        let loss = tape.cross_entropy(out.logits, label)?;
        let mut grads = tape.backward(loss)?;
        Ok(SampleGrad {
            loss: tape.value(loss).item(),
            logits: tape.value(out.logits).clone(),
            grads: collect_grads(&p, &mut grads, &self.params),
        })
    }
}

/// Result of [`Model::loss_and_grads`].
#[derive(Clone, Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub logits: Tensor,
    pub grads: ModelParams<Tensor>,
}

/// Pulls each parameter's gradient out of `grads`; parameters that did not
/// reach the loss get zeros.
pub fn collect_grads(
    vars: &ModelParams<Var>,
    grads: &mut Gradients,
    like: &ModelParams<Tensor>,
) -> ModelParams<Tensor> {
    let mut shapes = like.tensors().into_iter().map(|t| t.shape().to_vec());
    vars.map(|v| {
        let shape = shapes.next().unwrap_or_default();
        grads.take(*v).unwrap_or_else(|| Tensor::zeros(&shape))
    })
}

/// Reverses the frame order of a `[T, ...]` tensor.
pub fn reverse_frames(clip: &Tensor) -> Tensor {
    let t = clip.shape()[0];
    permute_frames(clip, &(0..t).rev().collect::<Vec<_>>())
}

/// Output frame `i` is input frame `perm[i]`.
pub fn permute_frames(clip: &Tensor, perm: &[usize]) -> Tensor {
    let frames: Vec<Tensor> = perm.iter().map(|&i| clip.index_leading(i)).collect();
    Tensor::stack(&frames).expect("frames share a shape")
}
