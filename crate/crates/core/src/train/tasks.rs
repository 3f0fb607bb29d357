use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{reverse_frames, CHANNELS};

/// Which synthetic video task to generate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// A bright vertical bar sweeping right (class 0) or left (class 1).
    MovingBarDirection,
    /// A clip that brightens over time (class 0) or the same clip played
    /// backwards (class 1).
    ForwardVsReversed,
    /// A static grating whose orientation is the class, with jittered
    /// phase, contrast and offset; any single frame identifies it.
    FramewiseTexture,
}

fn default_classes() -> usize {
    2
}

/// A synthetic clip distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Only [`TaskKind::FramewiseTexture`] supports more than two.
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Standard deviation of per-pixel Gaussian-like noise.
    #[serde(default)]
    pub noise: f64,
}

/// Clips with their labels, in generation order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipBatch {
    pub clips: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl ClipBatch {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, frames: usize, height: usize, width: usize) -> Self {
        SyntheticTask {
            kind,
            frames,
            height,
            width,
            classes: 2,
            noise: 0.1,
        }
    }

    /// Whether consecutive samples come in (class 0, class 1) pairs that
    /// share their frames.
    pub fn is_paired(&self) -> bool {
        self.kind != TaskKind::FramewiseTexture
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("task extents must be positive"));
        }
        if self.is_paired() && self.classes != 2 {
            return Err(Error::config(format!(
                "{:?} has exactly 2 classes",
                self.kind
            )));
        }
        if self.classes < 2 {
            return Err(Error::config("a task needs at least 2 classes"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise must be finite and non-negative"));
        }
        Ok(())
    }

    fn shape(&self) -> [usize; 4] {
        [self.frames, CHANNELS, self.height, self.width]
    }

    fn noise(&self, rng: &mut ChaCha8Rng) -> f64 {
        // sum of three uniforms: zero mean, unit variance, bounded
        let u: f64 = (0..3).map(|_| rng.random_range(-1.0..1.0)).sum();
        self.noise * u
    }

    fn brightening(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let [t, c, h, w] = self.shape();
        let texture: Vec<f64> = (0..c * h * w)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let amp = rng.random_range(0.5..1.0);
        let plane = c * h * w;
        Tensor::from_fn(&self.shape(), |i| {
            let f = i / plane;
            let ramp = if t > 1 {
                f as f64 / (t - 1) as f64 - 0.5
            } else {
                0.0
            };
            texture[i % plane] + amp * ramp + self.noise(rng)
        })
    }

    fn bar_right(&self, rng: &mut ChaCha8Rng) -> Tensor {
        let [t, _, h, w] = self.shape();
        let bar = (w / 8).max(1);
        let span = w.saturating_sub(bar);
        let step = if t > 1 { span / (t - 1) } else { 0 };
        let start = rng.random_range(0..=span - step * t.saturating_sub(1));
        let colour: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        Tensor::from_fn(&self.shape(), |i| {
            let x = i % w;
            let c = (i / (w * h)) % CHANNELS;
            let f = i / (CHANNELS * h * w);
            let left = start + f * step;
            let on = (left..left + bar).contains(&x);
            (if on { colour[c] } else { 0.0 }) + self.noise(rng)
        })
    }

    fn grating(&self, class: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let [_, _, h, w] = self.shape();
        let angle = std::f64::consts::PI * class as f64 / self.classes as f64;
        let (s, c) = angle.sin_cos();
        let freq = 2.0 * std::f64::consts::PI / 4.0;
        let quarter = std::f64::consts::FRAC_PI_4;
        let phase = rng.random_range(-quarter..quarter);
        let contrast = rng.random_range(0.3..0.6);
        let offset = rng.random_range(-0.2..0.2);
        Tensor::from_fn(&self.shape(), |i| {
            let (y, x) = ((i / w) % h, i % w);
            offset
                + contrast * (freq * (c * x as f64 + s * y as f64) + phase).cos()
                + self.noise(rng)
        })
    }
}

/// `n` labelled clips, deterministic in `seed`.
///
/// Paired tasks emit samples `2i` (class 0) and `2i + 1` (class 1) from
/// one base clip; class 1 is the exact frame reversal of class 0, so both
/// hold the same frames in opposite order.
pub fn generate_batch(task: &SyntheticTask, n: usize, seed: u64) -> Result<ClipBatch> {
    task.validate()?;
    if n == 0 {
        return Err(Error::Contract("generate_batch needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    while clips.len() < n {
        match task.kind {
            TaskKind::FramewiseTexture => {
                let class = clips.len() % task.classes;
                clips.push(task.grating(class, &mut rng));
                labels.push(class);
            }
            kind => {
                let base = match kind {
                    TaskKind::ForwardVsReversed => task.brightening(&mut rng),
                    _ => task.bar_right(&mut rng),
                };
                let reversed = reverse_frames(&base);
                clips.push(base);
                labels.push(0);
                if clips.len() < n {
                    clips.push(reversed);
                    labels.push(1);
                }
            }
        }
    }
    Ok(ClipBatch { clips, labels })
}
