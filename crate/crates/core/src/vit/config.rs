use serde::{Deserialize, Serialize};

use crate::attention::{ScaleMode, ShiftConfig, Variant};
use crate::error::{Error, Result};
use crate::tensor::Boundary;

/// Colour channels per frame.
pub const CHANNELS: usize = 3;

/// Shift amounts shared by every shifting block. The unit depends on the
/// block: heads for `msca-*`, token rows for `msca-p*`, class-token
/// channels for `tokenshift`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftAmounts {
    pub back: usize,
    pub fwd: usize,
    #[serde(default)]
    pub boundary: Boundary,
}

fn default_true() -> bool {
    true
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    1e-6
}

/// Switches on the attention modules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionOptions {
    #[serde(default)]
    pub scale: ScaleMode,
    #[serde(default = "default_true")]
    pub qkv_bias: bool,
    #[serde(default = "default_true")]
    pub out_proj: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            scale: ScaleMode::default(),
            qkv_bias: true,
            out_proj: true,
        }
    }
}

/// Architecture of a frame-wise video transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames per clip.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Square patch side in pixels.
    pub patch: usize,
    /// Embedding width.
    pub dim: usize,
    pub heads: usize,
    /// Encoder block count.
    pub depth: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// One entry per block.
    pub block_kinds: Vec<Variant>,
    #[serde(default)]
    pub shift: ShiftAmounts,
    pub classes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub attention: AttentionOptions,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Desk-scale default: 8 frames of 32×32, 8×8 patches (16 per frame),
    /// width 64, 4 heads, 4 blocks.
    pub fn toy(kind: Variant) -> Self {
        let depth = 4;
        ModelConfig {
            frames: 8,
            height: 32,
            width: 32,
            patch: 8,
            dim: 64,
            heads: 4,
            depth,
            mlp_ratio: 4,
            block_kinds: vec![kind; depth],
            shift: ShiftAmounts {
                back: 1,
                fwd: 1,
                boundary: Boundary::Zero,
            },
            classes: 2,
            seed: 0,
            attention: AttentionOptions::default(),
            ln_eps: default_ln_eps(),
        }
    }

    /// The smallest useful model: 2 frames of 8×8, 4×4 patches, width 8,
    /// 2 heads, 2 blocks.
    pub fn tiny(kind: Variant) -> Self {
        let depth = 2;
        ModelConfig {
            frames: 2,
            height: 8,
            width: 8,
            patch: 4,
            dim: 8,
            heads: 2,
            depth,
            block_kinds: vec![kind; depth],
            ..Self::toy(kind)
        }
    }

    pub fn with_kinds(mut self, kinds: Vec<Variant>) -> Self {
        self.depth = kinds.len();
        self.block_kinds = kinds;
        self
    }

    pub fn with_shift(mut self, back: usize, fwd: usize) -> Self {
        self.shift.back = back;
        self.shift.fwd = fwd;
        self
    }

    /// Patches per frame, `HW / P²`.
    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Tokens per frame including the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    /// Flattened patch length, `3P²`.
    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    /// Shift of block `i`, or `None` for plain MSA.
    pub fn shift_config(&self, i: usize) -> Option<ShiftConfig> {
        self.block_kinds[i].shift_config(self.shift.back, self.shift.fwd, self.shift.boundary)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("patch", self.patch),
            ("dim", self.dim),
            ("heads", self.heads),
            ("depth", self.depth),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "frame {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.block_kinds.len() != self.depth {
            return Err(Error::config(format!(
                "block_kinds has {} entries for depth {}",
                self.block_kinds.len(),
                self.depth
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("ln_eps must be positive"));
        }
        for i in 0..self.depth {
            if let Some(s) = self.shift_config(i) {
                s.validate(self.heads, self.tokens(), self.dim)
                    .map_err(|e| {
                        Error::config(format!("block {i} ({}): {e}", self.block_kinds[i]))
                    })?;
            }
        }
        Ok(())
    }
}
