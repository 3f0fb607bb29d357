//! Ablation grids: one training run per cell, collected into a table.

use std::path::PathBuf;

use msca::attention::Variant;
use msca::evalkit::{model_flops, ComparisonRow, ComparisonTable};
use msca::train::TrainingLog;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::run::{
    create_run_dir, run_experiment, write_json, write_log_file, write_new, LOG_FILE, SPEC_FILE,
    SUMMARY_FILE,
};
use crate::spec::ExperimentSpec;

/// Which axis to sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    /// Baseline plus the fourteen MSCA variants in every block.
    Variant,
    /// `h_b = h_f` from 0 to 4 for one MSCA variant.
    ShiftAmount,
    /// MSCA in the first 0, L/3, 2L/3 and L blocks, MSA in the rest.
    BlockCount,
}

/// One grid point.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    /// Directory name under `cells/`.
    pub slug: String,
    pub spec: ExperimentSpec,
}

/// The MSCA variant that shift and block sweeps vary: the spec's first
/// MSCA block kind, else MSCA-KV.
pub fn sweep_variant(spec: &ExperimentSpec) -> Variant {
    spec.model
        .block_kinds
        .iter()
        .copied()
        .find(|k| k.is_msca())
        .unwrap_or_else(|| "msca-kv".parse().expect("valid variant"))
}

fn heading(sweep: Sweep) -> &'static str {
    match sweep {
        Sweep::Variant => "model",
        Sweep::ShiftAmount => "h_b,h_f",
        Sweep::BlockCount => "# MSCA / # MSA",
    }
}

/// Grid points of `sweep` around `spec`, in table order.
pub fn cells(spec: &ExperimentSpec, sweep: Sweep) -> Vec<Cell> {
    let depth = spec.model.depth;
    let with = |kinds: Vec<Variant>, shift: Option<usize>| {
        let mut s = spec.clone();
        s.model = s.model.with_kinds(kinds);
        if let Some(k) = shift {
            s.model = s.model.with_shift(k, k);
        }
        s
    };
    match sweep {
        Sweep::Variant => std::iter::once(Variant::Msa)
            .chain(Variant::msca_grid())
            .map(|v| Cell {
                label: v.to_string(),
                slug: v.to_string(),
                spec: with(vec![v; depth], None),
            })
            .collect(),
        Sweep::ShiftAmount => {
            let v = sweep_variant(spec);
            (0..=4)
                .map(|k| Cell {
                    label: format!("{k},{k}"),
                    slug: format!("shift-{k}"),
                    spec: with(vec![v; depth], Some(k)),
                })
                .collect()
        }
        Sweep::BlockCount => {
            let v = sweep_variant(spec);
            let mut counts: Vec<usize> = (0..=3).map(|i| depth * i / 3).collect();
            counts.dedup();
            counts
                .into_iter()
                .map(|c| {
                    let mut kinds = vec![v; c];
                    kinds.extend(vec![Variant::Msa; depth - c]);
                    Cell {
                        label: format!("{c} / {}", depth - c),
                        slug: format!("msca-{c}-msa-{}", depth - c),
                        spec: with(kinds, None),
                    }
                })
                .collect()
        }
    }
}

/// Result of a whole grid.
pub struct Ablation {
    pub dir: PathBuf,
    pub table: ComparisonTable,
    /// First cell failure, if any; the grid still ran to the end.
    pub first_error: Option<CliError>,
}

/// Runs every cell of `sweep` in order and writes
/// `<output_dir>/<name>-<sweep>/` with the base spec, per-cell logs and
/// summaries, and the comparison table as CSV, text and JSON.
pub fn cmd_ablate(
    spec: &ExperimentSpec,
    sweep: Sweep,
    verbose: bool,
) -> Result<Ablation, CliError> {
    let sweep_name = serde_json::to_value(sweep).expect("serializable");
    let sweep_name = sweep_name.as_str().expect("string");
    let dir = create_run_dir(&spec.output_dir, &format!("{}-{sweep_name}", spec.name))?;
    write_new(&dir.join(SPEC_FILE), spec.to_json().as_bytes())?;
    let cells_dir = dir.join("cells");
    std::fs::create_dir(&cells_dir)?;
    let mut rows = Vec::new();
    let mut first_error = None;
    for cell in cells(spec, sweep) {
        if verbose {
            eprintln!("== {} {}", heading(sweep), cell.label);
        }
        let cell_dir = cells_dir.join(&cell.slug);
        std::fs::create_dir(&cell_dir)?;
        let flops = model_flops(&cell.spec.model).total;
        let mut partial = TrainingLog::default();
        let outcome = cell
            .spec
            .check()
            .and_then(|()| run_experiment(&cell.spec, &mut partial, verbose));
        let row = match outcome {
            Ok(run) => {
                write_log_file(&run.outcome.log, &cell_dir.join(LOG_FILE))?;
                write_json(&cell_dir.join(SUMMARY_FILE), &run.summary)?;
                ComparisonRow {
                    label: cell.label,
                    top1: Some(run.summary.eval.top1),
                    top5: run.summary.eval.top5,
                    final_loss: Some(run.summary.final_loss),
                    flops,
                    error: None,
                }
            }
            Err(e) => {
                write_log_file(&partial, &cell_dir.join(LOG_FILE))?;
                let msg = e.to_string();
                if verbose {
                    eprintln!("cell {} failed: {msg}", cell.label);
                }
                first_error.get_or_insert(e);
                ComparisonRow {
                    label: cell.label,
                    top1: None,
                    top5: None,
                    final_loss: None,
                    flops,
                    error: Some(msg),
                }
            }
        };
        rows.push(row);
    }
    let table = ComparisonTable {
        title: format!("{} sweep, {:?} task", sweep_name, spec.task.kind),
        label_heading: heading(sweep).into(),
        rows,
    };
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write_new(&dir.join("table.csv"), &csv)?;
    write_new(&dir.join("table.txt"), table.to_string().as_bytes())?;
    write_json(&dir.join("table.json"), &table)?;
    Ok(Ablation {
        dir,
        table,
        first_error,
    })
}
