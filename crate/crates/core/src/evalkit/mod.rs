//! Multi-view evaluation, top-k accuracy, closed-form FLOP counts and
//! comparison tables.

mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{ComparisonRow, ComparisonTable, BANNER};

use crate::attention::{attention_flops, AttentionKind};
use crate::error::{Error, Result};
use crate::flops::FlopReport;
use crate::tensor::Tensor;
use crate::vit::{Model, ModelConfig, CHANNELS};

/// Where a spatial crop sits along the longer frame side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropPosition {
    Left,
    Center,
    Right,
}

impl CropPosition {
    /// Crops used for `n` views: centre alone, then both ends, then all three.
    pub fn for_count(n: usize) -> Result<Vec<CropPosition>> {
        use CropPosition::*;
        match n {
            1 => Ok(vec![Center]),
            2 => Ok(vec![Left, Right]),
            3 => Ok(vec![Left, Center, Right]),
            _ => Err(Error::config(format!(
                "{n} spatial crops; supported are 1, 2 or 3"
            ))),
        }
    }

    fn offset(self, full: usize, crop: usize) -> usize {
        match self {
            CropPosition::Left => 0,
            CropPosition::Center => (full - crop) / 2,
            CropPosition::Right => full - crop,
        }
    }
}

fn default_stride() -> usize {
    1
}

/// Views per video: `clips` temporal samples times `crops` spatial crops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiViewConfig {
    pub clips: usize,
    pub crops: usize,
    /// Frame step inside a clip.
    #[serde(default = "default_stride")]
    pub frame_stride: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MultiViewConfig {
    /// Two clips by three crops.
    fn default() -> Self {
        MultiViewConfig {
            clips: 2,
            crops: 3,
            frame_stride: 1,
            seed: 0,
        }
    }
}

impl MultiViewConfig {
    pub fn single() -> Self {
        MultiViewConfig {
            clips: 1,
            crops: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clips == 0 || self.frame_stride == 0 {
            return Err(Error::config("clips and frame_stride must be at least 1"));
        }
        CropPosition::for_count(self.crops).map(|_| ())
    }

    pub fn views(&self) -> usize {
        self.clips * self.crops
    }
}

/// One view's placement inside a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub start_frame: usize,
    pub top: usize,
    pub left: usize,
}

/// View placements for a `[T_v, 3, H_v, W_v]` video and a model that
/// takes `frames × height × width` clips. Clip starts are drawn uniformly
/// from `cfg.seed`; crops move along the longer side and are centred on
/// the other. Order is clip-major.
pub fn sample_views(
    video_shape: &[usize],
    model: &ModelConfig,
    cfg: &MultiViewConfig,
) -> Result<Vec<View>> {
    cfg.validate()?;
    let &[tv, c, hv, wv] = video_shape else {
        return Err(Error::Dimension {
            op: "sample_views",
            lhs: video_shape.to_vec(),
            rhs: vec![],
        });
    };
    if c != CHANNELS {
        return Err(Error::Dimension {
            op: "sample_views",
            lhs: video_shape.to_vec(),
            rhs: vec![tv, CHANNELS, hv, wv],
        });
    }
    let span = (model.frames - 1) * cfg.frame_stride + 1;
    if tv < span || hv < model.height || wv < model.width {
        return Err(Error::Sampling(format!(
            "video {tv}x{hv}x{wv} is smaller than the {span}x{}x{} clip span",
            model.height, model.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let crops = CropPosition::for_count(cfg.crops)?;
    let mut views = Vec::with_capacity(cfg.views());
    for _ in 0..cfg.clips {
        let start_frame = rng.random_range(0..=tv - span);
        for &pos in &crops {
            let (top, left) = if wv >= hv {
                (
                    CropPosition::Center.offset(hv, model.height),
                    pos.offset(wv, model.width),
                )
            } else {
                (
                    pos.offset(hv, model.height),
                    CropPosition::Center.offset(wv, model.width),
                )
            };
            views.push(View {
                start_frame,
                top,
                left,
            });
        }
    }
    Ok(views)
}

/// Cuts one `[frames, 3, height, width]` clip out of `video`.
pub fn extract_view(video: &Tensor, view: View, model: &ModelConfig, stride: usize) -> Tensor {
    let [_, _, hv, wv] = *video.shape() else {
        panic!("extract_view needs a rank-4 video");
    };
    let (h, w) = (model.height, model.width);
    let src = video.data();
    let mut out = Vec::with_capacity(model.frames * CHANNELS * h * w);
    for f in 0..model.frames {
        let frame = view.start_frame + f * stride;
        for c in 0..CHANNELS {
            for y in 0..h {
                let row = ((frame * CHANNELS + c) * hv + view.top + y) * wv + view.left;
                out.extend_from_slice(&src[row..row + w]);
            }
        }
    }
    Tensor::new(vec![model.frames, CHANNELS, h, w], out).expect("sizes agree")
}

/// Mean softmax over all views of `video`. Views run in parallel; the
/// average is summed in view order.
pub fn multi_view_predict(model: &Model, video: &Tensor, cfg: &MultiViewConfig) -> Result<Tensor> {
    let views = sample_views(video.shape(), &model.config, cfg)?;
    let probs = views
        .par_iter()
        .map(|&v| model.probabilities(&extract_view(video, v, &model.config, cfg.frame_stride)))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = Tensor::zeros(&[model.config.classes]);
    for p in &probs {
        for (m, x) in mean.data_mut().iter_mut().zip(p.data()) {
            *m += x;
        }
    }
    let inv = 1.0 / probs.len() as f64;
    Ok(mean.map(|m| m * inv))
}

/// Whether `label` is among the `k` best `scores`; equal scores rank the
/// lower class index first.
pub fn in_top_k(scores: &[f64], label: usize, k: usize) -> bool {
    let s = scores[label];
    let rank = scores
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x > s || (x == s && i < label))
        .count();
    rank < k
}

/// Fraction of samples whose label is among the `k` best scores.
pub fn accuracy_topk(scores: &[Tensor], labels: &[usize], k: usize) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Contract(format!(
            "{} score rows for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut hits = 0;
    for (s, &l) in scores.iter().zip(labels) {
        let classes = s.numel();
        if k == 0 || k > classes || l >= classes {
            return Err(Error::Contract(format!(
                "top-{k} with label {l} over {classes} classes"
            )));
        }
        hits += usize::from(in_top_k(s.data(), l, k));
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// Multiply-adds of one forward pass of `cfg` on one clip.
///
/// Attention terms grow as `T·(N+1)²·D`: frames never attend to each
/// other, and shifts add nothing.
pub fn model_flops(cfg: &ModelConfig) -> FlopReport {
    let (t, n, d) = (cfg.frames as u64, cfg.patches() as u64, cfg.dim as u64);
    let r = n + 1;
    let embed = t * n * cfg.patch_dim() as u64 * d;
    let mlp_per_block = 2 * t * r * d * cfg.mlp_hidden() as u64;
    let head = d * cfg.classes as u64;
    let mut report = FlopReport::new(0, 0, 0, 0, 0, embed, head);
    for kind in &cfg.block_kinds {
        let mut attn = attention_flops(
            AttentionKind::from(*kind),
            cfg.frames,
            cfg.patches(),
            cfg.dim,
            cfg.heads,
        );
        if !cfg.attention.out_proj {
            attn = FlopReport::new(
                attn.qkv_proj,
                attn.attn_scores,
                attn.attn_weighted_sum,
                0,
                0,
                0,
                0,
            );
        }
        report = report + attn + FlopReport::new(0, 0, 0, 0, mlp_per_block, 0, 0);
    }
    report
}
