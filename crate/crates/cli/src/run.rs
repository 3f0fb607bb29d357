//! Run directories, training, evaluation and summaries.

use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use msca::attention::Variant;
use msca::evalkit::{accuracy_topk, model_flops, multi_view_predict};
use msca::flops::FlopReport;
use msca::train::{
    generate_batch, train_with, ClipBatch, EpochRecord, SyntheticTask, TaskKind, TrainOutcome,
    TrainingLog,
};
use msca::vit::{save_checkpoint, Model, ShiftAmounts};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::spec::ExperimentSpec;

pub const SPEC_FILE: &str = "spec.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Mixed into the training seed to draw evaluation videos.
const EVAL_SEED_SALT: u64 = 0x6576_616c;

/// Creates `base/name`, or `base/name-1`, `base/name-2`, … if taken.
/// Existing directories are never reused.
pub fn create_run_dir(base: &Path, name: &str) -> io::Result<PathBuf> {
    fs::create_dir_all(base)?;
    for i in 0.. {
        let dir = if i == 0 {
            base.join(name)
        } else {
            base.join(format!("{name}-{i}"))
        };
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

/// Creates `path` only if it does not exist yet.
pub fn write_new(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    f.write_all(bytes)
        .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))
}

fn write_log(log: &TrainingLog, path: &Path) -> Result<(), CliError> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    write_new(path, &buf)
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Multi-view scores on held-out videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub samples: usize,
    pub clips: usize,
    pub crops: usize,
    pub top1: f64,
    /// Absent with fewer than five classes.
    pub top5: Option<f64>,
}

/// What `summary.json` holds. Contains no timings or paths, so equal
/// specs give byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub task: TaskKind,
    pub block_kinds: Vec<Variant>,
    pub shift: ShiftAmounts,
    pub seed: u64,
    pub parameters: usize,
    pub flops: FlopReport,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
    pub best_train_acc: f64,
    pub eval: EvalResult,
}

/// The held-out videos for `spec`: clip-shaped task, stretched by the
/// eval margins.
pub fn eval_videos(spec: &ExperimentSpec) -> Result<ClipBatch, CliError> {
    let views = &spec.eval.views;
    let span = (spec.model.frames - 1) * views.frame_stride + 1;
    let task = SyntheticTask {
        frames: span + spec.eval.extra_frames,
        width: spec.task.width + spec.eval.extra_width,
        ..spec.task.clone()
    };
    Ok(generate_batch(
        &task,
        spec.eval.samples,
        spec.train.seed ^ EVAL_SEED_SALT,
    )?)
}

pub fn evaluate(model: &Model, spec: &ExperimentSpec) -> Result<EvalResult, CliError> {
    let videos = eval_videos(spec)?;
    let scores = videos
        .clips
        .iter()
        .map(|v| multi_view_predict(model, v, &spec.eval.views))
        .collect::<msca::Result<Vec<_>>>()?;
    let top5 = if model.config.classes >= 5 {
        Some(accuracy_topk(&scores, &videos.labels, 5)?)
    } else {
        None
    };
    Ok(EvalResult {
        samples: videos.len(),
        clips: spec.eval.views.clips,
        crops: spec.eval.views.crops,
        top1: accuracy_topk(&scores, &videos.labels, 1)?,
        top5,
    })
}

/// A finished training run, not yet written anywhere.
pub struct RunOutput {
    pub outcome: TrainOutcome,
    pub summary: Summary,
}

fn progress_line(r: &EpochRecord, epochs: usize) -> String {
    format!(
        "epoch {:>3}/{epochs}  lr {:.4}  loss {:.4}  train {:.3}  val {:.3}",
        r.epoch, r.lr, r.loss, r.train_acc, r.val_acc
    )
}

/// Trains and evaluates `spec`. Epoch records seen before a failure are
/// kept in `partial`.
pub fn run_experiment(
    spec: &ExperimentSpec,
    partial: &mut TrainingLog,
    verbose: bool,
) -> Result<RunOutput, CliError> {
    let epochs = spec.train.epochs;
    let outcome = train_with(&spec.model, &spec.train, &spec.task, |r| {
        if verbose {
            eprintln!("{}", progress_line(r, epochs));
        }
        partial.records.push(r.clone());
    })?;
    let eval = evaluate(&outcome.model, spec)?;
    let last = outcome.log.last().expect("at least one epoch");
    let summary = Summary {
        name: spec.name.clone(),
        task: spec.task.kind,
        block_kinds: spec.model.block_kinds.clone(),
        shift: spec.model.shift,
        seed: spec.train.seed,
        parameters: outcome.model.params.num_scalars(),
        flops: model_flops(&spec.model),
        epochs,
        steps: last.step,
        final_loss: last.loss,
        final_train_acc: last.train_acc,
        final_val_acc: last.val_acc,
        best_train_acc: outcome.log.best_train_acc(),
        eval,
    };
    Ok(RunOutput { outcome, summary })
}

/// Writes a run directory for `spec`: spec copy, training log,
/// checkpoint and summary. Returns the directory. On a failed run the
/// spec copy and the partial log are still written.
pub fn cmd_train(spec: &ExperimentSpec, verbose: bool) -> Result<(PathBuf, Summary), CliError> {
    let dir = create_run_dir(&spec.output_dir, &spec.name)?;
    write_new(&dir.join(SPEC_FILE), spec.to_json().as_bytes())?;
    let mut partial = TrainingLog::default();
    let run = match run_experiment(spec, &mut partial, verbose) {
        Ok(run) => run,
        Err(e) => {
            write_log(&partial, &dir.join(LOG_FILE))?;
            return Err(e);
        }
    };
    write_log(&run.outcome.log, &dir.join(LOG_FILE))?;
    save_checkpoint(&run.outcome.model, &dir.join(CHECKPOINT_DIR))?;
    write_new(&dir.join(SUMMARY_FILE), &to_json(&run.summary))?;
    Ok((dir, run.summary))
}

/// Re-evaluates the checkpoint in `run_dir` under the saved spec with
/// optional view and seed overrides, and records the result as
/// `eval-CxS-seedN.json` beside it.
pub fn cmd_eval(
    run_dir: &Path,
    views: Option<(usize, usize)>,
    seed: Option<u64>,
) -> Result<(PathBuf, EvalResult), CliError> {
    let mut spec = ExperimentSpec::load(&run_dir.join(SPEC_FILE))?;
    if let Some((clips, crops)) = views {
        spec.eval.views.clips = clips;
        spec.eval.views.crops = crops;
    }
    if let Some(seed) = seed {
        spec.eval.views.seed = seed;
    }
    spec.check()?;
    let model = msca::vit::load_checkpoint(&run_dir.join(CHECKPOINT_DIR))?;
    if model.config != spec.model {
        return Err(CliError::Failed(format!(
            "{}: checkpoint config differs from {SPEC_FILE}",
            run_dir.display()
        )));
    }
    let result = evaluate(&model, &spec)?;
    let v = &spec.eval.views;
    let path = run_dir.join(format!("eval-{}x{}-seed{}.json", v.clips, v.crops, v.seed));
    if !path.exists() {
        write_new(&path, &to_json(&result))?;
    }
    Ok((path, result))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    write_new(path, &to_json(v))
}

pub(crate) fn write_log_file(log: &TrainingLog, path: &Path) -> Result<(), CliError> {
    write_log(log, path)
}
