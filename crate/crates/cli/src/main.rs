use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mpkit_cli::commands::{EvalData, GridOptions};
use mpkit_cli::{
    cmd_equivalency, cmd_eval, cmd_gen_data, cmd_landscape, cmd_train, effective_jobs, Failure,
    Global, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "mpkit",
    version,
    about = "Martingale-posterior ensembles for small networks"
)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for ensemble members (capped by MPKIT_THREADS).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replace outputs in a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as CSV with a manifest.
    GenData,
    /// Train an ensemble.
    Train,
    /// Calibration report and per-example probabilities.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        ensemble: PathBuf,
        /// CSV with a `label` column; defaults to the configured test set.
        #[arg(long, conflicts_with = "split")]
        data: Option<PathBuf>,
        #[arg(long, value_parser = ["train", "test"])]
        split: Option<String>,
    },
    /// Predictive-uncertainty grid over a 2-D feature space.
    Landscape {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        padding: Option<f64>,
    },
    /// Paired DE/BB experiment with margin traces.
    Equivalency,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| Failure::Config("--out is required".into()))?;
    let g = Global::new(out)
        .with_force(cli.force)
        .with_jobs(effective_jobs(cli.jobs))
        .with_seed(cli.seed);
    let config = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let need_config = || {
        config
            .clone()
            .ok_or_else(|| Failure::Config("--config is required".into()))
    };
    match cli.command {
        Command::GenData => cmd_gen_data(&need_config()?, &g),
        Command::Train => cmd_train(&need_config()?, &g).map(|_| ()),
        Command::Eval {
            ensemble,
            data,
            split,
        } => {
            let data = match (data, split.as_deref()) {
                (Some(p), _) => EvalData::Csv(p),
                (None, Some("train")) => EvalData::Train,
                _ => EvalData::Test,
            };
            cmd_eval(&ensemble, config.as_ref(), &data, &g).map(|_| ())
        }
        Command::Landscape {
            ensemble,
            resolution,
            padding,
        } => cmd_landscape(
            &ensemble,
            config.as_ref(),
            GridOptions {
                resolution,
                padding,
            },
            &g,
        )
        .map(|_| ()),
        Command::Equivalency => cmd_equivalency(&need_config()?, &g).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("mpkit: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
