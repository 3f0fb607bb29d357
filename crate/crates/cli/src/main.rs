use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msca::attention::Variant;
use msca::evalkit::model_flops;
use msca::selftest::{run_selftest, SelftestOptions};
use msca::tensor::Boundary;
use msca::train::{with_thread_pool, THREADS_ENV};
use msca::vit::ModelConfig;
use msca_cli::{
    cmd_ablate, cmd_eval, cmd_train, parse_views, CliError, ExperimentSpec, Sweep, SCHEMA,
};

#[derive(Parser)]
#[command(
    name = "msca",
    version,
    about = "Frame-wise video transformers with temporal cross-attention"
)]
#[command(after_help = "Thread count: set MSCA_NUM_THREADS (default: all cores).")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory, replacing the spec's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the model, data and views.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluation views as CLIPSxCROPS, e.g. 2x3.
    #[arg(long, value_parser = parse_views)]
    views: Option<(usize, usize)>,
    /// No per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

impl RunArgs {
    fn spec(&self) -> Result<ExperimentSpec, CliError> {
        let mut spec = ExperimentSpec::load(&self.spec)?;
        spec.override_with(self.out.as_deref(), self.seed, self.views)?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundaryArg {
    Zero,
    Clamp,
    Wrap,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train(RunArgs),
    /// Re-score a run directory's checkpoint.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_parser = parse_views)]
        views: Option<(usize, usize)>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a grid of models and print a comparison table.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        sweep: Sweep,
    },
    /// Multiply-add counts per block kind.
    Flops {
        /// Take the geometry from this spec instead of the toy model.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run the invariant suite.
    Selftest {
        /// Boundary rule handed to the code under test.
        #[arg(long, value_enum, default_value = "zero", hide = true)]
        boundary: BoundaryArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the experiment spec JSON schema.
    Schema,
}

fn flops(spec: Option<PathBuf>, json: bool) -> Result<(), CliError> {
    let base = match spec {
        Some(p) => ExperimentSpec::load(&p)?.model,
        None => ModelConfig::toy(Variant::Msa),
    };
    let mut kinds = vec![Variant::Msa, Variant::TokenShift];
    kinds.extend(Variant::msca_grid());
    let reports: Vec<_> = kinds
        .iter()
        .map(|&k| {
            (
                k,
                model_flops(&base.clone().with_kinds(vec![k; base.depth])),
            )
        })
        .collect();
    if json {
        let map: serde_json::Map<String, serde_json::Value> = reports
            .iter()
            .map(|(k, r)| {
                (
                    k.to_string(),
                    serde_json::to_value(r).expect("serializable"),
                )
            })
            .collect();
        println!(
            "{}",
            serde_json::to_string_pretty(&map).expect("serializable")
        );
        return Ok(());
    }
    println!(
        "{} frames of {}x{}, patch {}, dim {}, {} heads, {} blocks (multiply-adds per clip)",
        base.frames, base.height, base.width, base.patch, base.dim, base.heads, base.depth
    );
    println!(
        "{:<12} {:>14} {:>14} {:>14} {:>14}",
        "model", "attention", "mlp", "embed+head", "total"
    );
    for (k, r) in &reports {
        println!(
            "{:<12} {:>14} {:>14} {:>14} {:>14}",
            k.to_string(),
            r.attention(),
            r.mlp,
            r.embed + r.head,
            r.total
        );
    }
    Ok(())
}

fn selftest(boundary: BoundaryArg, seed: u64) -> Result<(), CliError> {
    let boundary = match boundary {
        BoundaryArg::Zero => Boundary::Zero,
        BoundaryArg::Clamp => Boundary::Clamp,
        BoundaryArg::Wrap => Boundary::Wrap,
    };
    let results = run_selftest(SelftestOptions { boundary, seed });
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "failing properties: {}",
            failed.join(", ")
        )))
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => {
            let spec = args.spec()?;
            let (dir, summary) = cmd_train(&spec, !args.quiet)?;
            println!("{}", dir.display());
            println!(
                "final loss {:.4}, train {:.3}, val {:.3}, eval top-1 {:.3} ({}x{} views)",
                summary.final_loss,
                summary.final_train_acc,
                summary.final_val_acc,
                summary.eval.top1,
                summary.eval.clips,
                summary.eval.crops
            );
            Ok(())
        }
        Command::Eval { run, views, seed } => {
            let (path, r) = cmd_eval(&run, views, seed)?;
            let top5 = r.top5.map_or("-".to_string(), |v| format!("{v:.3}"));
            println!(
                "top-1 {:.3}, top-5 {top5} over {} videos, {}x{} views",
                r.top1, r.samples, r.clips, r.crops
            );
            println!("{}", path.display());
            Ok(())
        }
        Command::Ablate { run, sweep } => {
            let spec = run.spec()?;
            let out = cmd_ablate(&spec, sweep, !run.quiet)?;
            println!("{}", out.table);
            println!("{}", out.dir.display());
            out.first_error.map_or(Ok(()), Err)
        }
        Command::Flops { spec, json } => flops(spec, json),
        Command::Selftest { boundary, seed } => selftest(boundary, seed),
        Command::Schema => {
            print!("{SCHEMA}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = with_thread_pool(|| run(cli.command))
        .unwrap_or_else(|e| Err(CliError::Failed(format!("{THREADS_ENV}: {e}"))));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
