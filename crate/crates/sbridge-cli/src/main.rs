use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sbridge_cli::commands::{self, EstimatorChoice};

#[derive(Parser)]
#[command(
    name = "sbridge",
    about = "Train, sample, and evaluate Schrödinger bridge generative models on 2D toy targets"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training job described by a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate samples from a checkpoint with the predictor-corrector sampler.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        /// Langevin corrector iterations per predictor step (overrides the config).
        #[arg(long)]
        corrector: Option<usize>,
        /// Corrector signal-to-noise ratio (overrides the config).
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path; defaults to samples.csv next to the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report negative log-likelihood and KL-to-prior on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// "gmm", "checkerboard", or "config" (the checkpoint's own target).
        #[arg(long)]
        dataset: String,
        #[arg(long, value_enum)]
        estimator: EstimatorChoice,
        /// Evaluation points.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump both policy vector fields on a square grid at chosen times.
    ExportField {
        #[arg(long)]
        ckpt: PathBuf,
        /// Grid resolution per axis.
        #[arg(long)]
        grid: usize,
        /// Half-width of the grid; points span [-extent, extent]^2.
        #[arg(long)]
        extent: f64,
        /// Comma-separated times, e.g. "0.0,0.5,1.0".
        #[arg(long)]
        times: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_times(times: &str) -> anyhow::Result<Vec<f64>> {
    times
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow::anyhow!("bad time value {s:?} in --times"))
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train { config } => commands::cmd_train(&config),
        Cmd::Sample { ckpt, n, corrector, snr, seed, out } => {
            commands::cmd_sample(&ckpt, n, corrector, snr, seed, out)
        }
        Cmd::Eval { ckpt, dataset, estimator, n, seed, out } => {
            commands::cmd_eval(&ckpt, &dataset, estimator, n, seed, out)
        }
        Cmd::ExportField { ckpt, grid, extent, times, out } => {
            commands::cmd_export_field(&ckpt, grid, extent, &parse_times(&times)?, out)
        }
    }
}

/// Exit code 2 is reserved for numerical divergence during training or
/// sampling; every other failure (bad config, unreadable checkpoint, bad
/// flags) exits 1.
fn is_divergence(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(
            cause.downcast_ref::<sbridge::Error>(),
            Some(sbridge::Error::DivergentLoss { .. } | sbridge::Error::NonFiniteState { .. })
        )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage/help output; keep exit 2 reserved for divergence.
            let is_help = e.use_stderr();
            e.print().ok();
            return if is_help { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_divergence(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
