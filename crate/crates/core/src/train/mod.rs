//! SGD with momentum, a step-decay schedule, synthetic video tasks and the
//! training loop that ties them to a [`Model`].

mod tasks;

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use tasks::{generate_batch, ClipBatch, SyntheticTask, TaskKind};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{Model, ModelConfig, ModelParams};

/// Environment variable that caps worker threads for per-sample work.
pub const THREADS_ENV: &str = "MSCA_NUM_THREADS";

fn default_accum() -> usize {
    1
}

/// Optimizer, schedule and data sizes for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    /// First epoch (1-based) that uses the decayed rate.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    /// Samples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    #[serde(default = "default_accum")]
    pub grad_accum_steps: usize,
    #[serde(default)]
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl TrainConfig {
    /// Toy-scale defaults: 30 epochs at 0.05, decayed tenfold from epoch 20.
    pub fn toy() -> Self {
        TrainConfig {
            epochs: 30,
            base_lr: 0.05,
            momentum: 0.9,
            decay_epoch: 20,
            decay_factor: 10.0,
            batch_size: 8,
            grad_accum_steps: 1,
            seed: 0,
            train_samples: 64,
            val_samples: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::config("decay_factor must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(Error::config(
                "batch_size and grad_accum_steps must be positive",
            ));
        }
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(Error::config(
                "train_samples and val_samples must be positive",
            ));
        }
        Ok(())
    }
}

/// Learning rate for 1-based `epoch`: `base_lr` before `decay_epoch`,
/// `base_lr / decay_factor` from it on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch >= cfg.decay_epoch {
        cfg.base_lr / cfg.decay_factor
    } else {
        cfg.base_lr
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: ModelParams<Tensor>,
}

impl SgdState {
    pub fn new(params: &ModelParams<Tensor>) -> Self {
        SgdState {
            velocity: params.zeros_like(),
        }
    }
}

/// `v ← momentum·v + g; θ ← θ − lr·v`. No weight decay.
pub fn sgd_momentum_step(
    params: &mut ModelParams<Tensor>,
    grads: &ModelParams<Tensor>,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut ps = params.tensors_mut();
    let gs = grads.tensors();
    let mut vs = state.velocity.tensors_mut();
    if ps.len() != gs.len() || ps.len() != vs.len() {
        return Err(Error::Contract(format!(
            "{} params, {} grads, {} velocity buffers",
            ps.len(),
            gs.len(),
            vs.len()
        )));
    }
    for ((p, g), v) in ps.iter_mut().zip(&gs).zip(vs.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Contract(format!(
                "shape mismatch: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    for ((p, g), v) in ps.into_iter().zip(gs).zip(vs) {
        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *v = momentum * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's training samples.
    pub loss: f64,
    /// Accuracy on the training set after the epoch's last step.
    pub train_acc: f64,
    pub val_acc: f64,
}

/// Per-epoch history of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    /// CSV with header `epoch,step,lr,loss,train_acc,val_acc`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r).map_err(csv_error)?;
        }
        out.flush().map_err(|e| Error::Contract(e.to_string()))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let records = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(csv_error)?;
        Ok(TrainingLog { records })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best_train_acc(&self) -> f64 {
        self.records.iter().map(|r| r.train_acc).fold(0.0, f64::max)
    }
}

fn csv_error(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte() as usize);
    Error::Format {
        offset,
        detail: e.to_string(),
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainingLog,
}

/// Index of the largest score; ties go to the lower index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `batch` that `model` classifies correctly.
pub fn accuracy(model: &Model, batch: &ClipBatch) -> Result<f64> {
    let preds = batch
        .clips
        .par_iter()
        .map(|c| model.logits(c).map(|l| argmax(l.data())))
        .collect::<Result<Vec<_>>>()?;
    let hits = preds
        .iter()
        .zip(&batch.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// Summed loss and summed gradients over `idx`, reduced in index order so
/// the result does not depend on thread count.
fn batch_grads(
    model: &Model,
    data: &ClipBatch,
    idx: &[usize],
) -> Result<(Vec<f64>, ModelParams<Tensor>)> {
    let per_sample = idx
        .par_iter()
        .map(|&i| model.loss_and_grads(&data.clips[i], data.labels[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut total = model.params.zeros_like();
    let mut losses = Vec::with_capacity(idx.len());
    for s in per_sample {
        losses.push(s.loss);
        for (t, g) in total.tensors_mut().into_iter().zip(s.grads.tensors()) {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok((losses, total))
}

/// Seeds for the training set, validation set and shuffling.
fn derived_seeds(seed: u64) -> (u64, u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rng.random(), rng.random(), rng.random())
}

/// Training and validation sets that [`train`] draws for `cfg`.
pub fn datasets(task: &SyntheticTask, cfg: &TrainConfig) -> Result<(ClipBatch, ClipBatch)> {
    let (train_seed, val_seed, _) = derived_seeds(cfg.seed);
    Ok((
        generate_batch(task, cfg.train_samples, train_seed)?,
        generate_batch(task, cfg.val_samples, val_seed)?,
    ))
}

/// Sample order for one epoch. Paired tasks keep each pair adjacent.
fn epoch_order(n: usize, group: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut groups: Vec<usize> = (0..n.div_ceil(group)).collect();
    groups.shuffle(rng);
    groups
        .into_iter()
        .flat_map(|g| (g * group..((g + 1) * group).min(n)).collect::<Vec<_>>())
        .collect()
}

fn check_geometry(model_cfg: &ModelConfig, task: &SyntheticTask) -> Result<()> {
    let m = (
        model_cfg.frames,
        model_cfg.height,
        model_cfg.width,
        model_cfg.classes,
    );
    let t = (task.frames, task.height, task.width, task.classes);
    if m != t {
        return Err(Error::config(format!(
            "model (frames, height, width, classes) {m:?} does not match task {t:?}"
        )));
    }
    Ok(())
}

/// Runs `f` on a pool sized by [`THREADS_ENV`], or rayon's default when
/// unset.
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::config(format!("{THREADS_ENV}={v:?} is not a thread count")))?,
        Err(_) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Trains a fresh model on `task` and logs every epoch.
pub fn train(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    task: &SyntheticTask,
) -> Result<TrainOutcome> {
    train_with(model_cfg, cfg, task, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    task: &SyntheticTask,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    task.validate()?;
    check_geometry(model_cfg, task)?;
    let (train_set, val_set) = datasets(task, cfg)?;
    let (_, _, shuffle_seed) = derived_seeds(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut model = Model::new(model_cfg.clone())?;
    let mut state = SgdState::new(&model.params);
    let group = if task.is_paired() { 2 } else { 1 };
    let per_step = cfg.batch_size * cfg.grad_accum_steps;
    let mut log = TrainingLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let order = epoch_order(train_set.len(), group, &mut rng);
        let mut loss_sum = 0.0;
        for (s, chunk) in order.chunks(per_step).enumerate() {
            let mut grads = model.params.zeros_like();
            for (m, micro) in chunk.chunks(cfg.batch_size).enumerate() {
                let batch = s * cfg.grad_accum_steps + m + 1;
                // non-finite activations stop the forward pass before a loss exists
                let (losses, g) = match batch_grads(&model, &train_set, micro) {
                    Err(Error::Numeric(_)) => {
                        return Err(Error::NonFiniteLoss {
                            epoch,
                            batch,
                            loss: f64::NAN,
                        })
                    }
                    r => r?,
                };
                if let Some(&bad) = losses.iter().find(|l| !l.is_finite()) {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch,
                        loss: bad,
                    });
                }
                loss_sum += losses.iter().sum::<f64>();
                for (a, b) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for t in grads.tensors_mut() {
                t.data_mut().iter_mut().for_each(|x| *x *= inv);
            }
            sgd_momentum_step(&mut model.params, &grads, &mut state, lr, cfg.momentum)?;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            step,
            lr,
            loss: loss_sum / train_set.len() as f64,
            train_acc: accuracy(&model, &train_set)?,
            val_acc: accuracy(&model, &val_set)?,
        };
        on_epoch(&record);
        log.records.push(record);
    }
    Ok(TrainOutcome { model, log })
}

#[cfg(test)]
mod tests;
