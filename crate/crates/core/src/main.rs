use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use mobility_anomaly::config::PipelineConfig;
use mobility_anomaly::pipeline::{Run, Stage};
use mobility_anomaly::Result;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Ingest,
    Index,
    Features,
    Train,
    Profile,
    Score,
    Evaluate,
    Synth,
    All,
}

/// Individual-level behavioral anomaly detection over staypoint data.
#[derive(Parser, Debug)]
#[command(name = "mobanom", version)]
struct Cli {
    /// Stage to run; `all` chains ingest through evaluate.
    command: Command,
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration field by dotted name, e.g. `model.k=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory holding every artifact.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Seed for both model training and synthetic data.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<()> {
    let base = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("model.seed={seed}"));
        overrides.push(format!("synth.seed={seed}"));
    }
    let config = base.with_overrides(&overrides)?;
    config.validate()?;
    let run = Run::new(config, cli.out);
    let stage = match cli.command {
        Command::All => {
            for line in run.all()? {
                println!("{line}");
            }
            return Ok(());
        }
        Command::Ingest => Stage::Ingest,
        Command::Index => Stage::Index,
        Command::Features => Stage::Features,
        Command::Train => Stage::Train,
        Command::Profile => Stage::Profile,
        Command::Score => Stage::Score,
        Command::Evaluate => Stage::Evaluate,
        Command::Synth => Stage::Synth,
    };
    println!("{}", run.stage(stage)?);
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
