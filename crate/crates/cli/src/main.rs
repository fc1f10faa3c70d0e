mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use isda::config::RunConfig;

/// Instance segmentation on synthetic shapes: data, training, evaluation and
/// ablations.
#[derive(Parser, Debug)]
#[command(name = "isda", version)]
struct Cli {
    /// Flat `key = value` configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (also the data generation seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `head.score_threshold`.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Extra `key=value` overrides, applied after the file and before the
    /// other flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic train and validation splits to `paths.data`.
    Generate,
    /// Trains from scratch, writing checkpoints and a line-per-epoch log.
    Train,
    /// Evaluates a checkpoint on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Segments one PGM image, writing a mask per instance and an overlay.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Runs the finite-difference gradient suite.
    Gradcheck,
    /// Trains every cell of the ablation grids and writes a CSV table.
    Ablate {
        #[arg(long, value_enum, default_value_t = GridArg::All)]
        grid: GridArg,
        /// Comma-separated seeds; each seed regenerates data and initialization.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum GridArg {
    Position,
    Resolution,
    All,
}

fn resolve_config(cli: &Cli) -> isda::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::new(),
    };
    for kv in &cli.overrides {
        let (k, v) =
            kv.split_once('=').ok_or_else(|| isda::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = out.clone();
    }
    if let Some(t) = cli.threshold {
        cfg.score_threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Exit status for an error: 2 for configuration problems, 3 for checkpoints
/// that do not fit the model, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<isda::Error>() {
        Some(isda::Error::Config(_)) => 2,
        Some(isda::Error::CheckpointMismatch(_) | isda::Error::MalformedCheckpoint(_)) => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Generate => commands::generate(&cfg).map(|_| true),
        Command::Train => commands::train(&cfg).map(|_| true),
        Command::Eval { checkpoint } => commands::eval(&cfg, checkpoint).map(|_| true),
        Command::Infer { checkpoint, image } => commands::infer(&cfg, checkpoint, image).map(|_| true),
        Command::Gradcheck => commands::gradcheck(),
        Command::Ablate { grid, seeds } => {
            let (position, resolution) = match grid {
                GridArg::Position => (true, false),
                GridArg::Resolution => (false, true),
                GridArg::All => (true, true),
            };
            commands::ablate(&cfg, position, resolution, seeds).map(|_| true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
