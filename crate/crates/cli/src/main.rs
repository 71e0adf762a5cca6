use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use mismix_core::experiments::{run_to_dir, Experiment, RunOptions, SweepSpec};

/// Seeded sweeps for Gaussian-mixture mean estimation with a mismatched variance.
#[derive(Parser, Debug)]
#[command(name = "mismix", version)]
struct Args {
    /// phase-diagram | mse-vs-sigma | clustering-vs-snr | ha-vs-theory
    experiment: String,

    /// TOML sweep config, or a manifest.json from an earlier run to replay it.
    #[arg(long)]
    config: PathBuf,

    /// Overrides `master_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (default: config value, then all cores).
    #[arg(long, env = "MISMIX_WORKERS")]
    workers: Option<usize>,

    /// Output directory (default: runs/<experiment>).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Reuse finished cells from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,

    /// Suppress per-cell progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

fn run(args: Args) -> Result<()> {
    let experiment: Experiment = args.experiment.parse()?;
    let mut spec = SweepSpec::load(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
    if spec.experiment != experiment {
        bail!("{} is a {} config, not {}", args.config.display(), spec.experiment, experiment);
    }
    if let Some(seed) = args.seed {
        spec.master_seed = seed;
    }
    let workers = args.workers.or(spec.workers);
    if workers == Some(0) {
        bail!("--workers must be at least 1");
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs").join(experiment.name()));
    let opts = RunOptions { workers, checkpoint_dir: None, resume: args.resume, progress: !args.quiet };
    let (grid, manifest) = run_to_dir(&spec, &out, &opts)?;
    eprintln!(
        "{}: {} cells ({} failed) in {:.1}s -> {}",
        experiment,
        grid.cells.len(),
        manifest.failed_cells,
        manifest.wall_time_seconds,
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
