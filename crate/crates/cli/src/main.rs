use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pets::run::{self, RunConfig};
use pets::sdaq::Backend;
use pets::tasks::Task;
use pets::PetsError;

#[derive(Parser, Debug)]
#[command(name = "pets", version, about = "Pattern-decoupled time series modelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    task: Option<TaskArg>,

    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split every series into its frequency patterns.
    Decompose,
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train {
        /// Training state (last.json) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write per-window predictions.
        #[arg(long)]
        predictions: bool,
    },
    /// Write per-layer pattern attention matrices for one test sample.
    ExportAttention {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        sample: usize,
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Forecast,
    Impute,
    Classify,
    Anomaly,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Cwt,
    Fft,
}

fn exit_code(e: &PetsError) -> u8 {
    match e {
        PetsError::InvalidConfig(_) => 1,
        PetsError::Numerical(_) | PetsError::DegenerateDenominator(_) => 3,
        _ => 2,
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, PetsError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = cli.task {
        let name = format!("{t:?}").to_lowercase();
        // keep the configured parameters when the kind is unchanged
        if cfg.task.name() != name {
            cfg.task = name.parse::<Task>()?;
        }
    }
    if let Some(b) = cli.backend {
        cfg.sdaq.backend = match b {
            BackendArg::Cwt => Backend::Cwt,
            BackendArg::Fft => Backend::Fft,
        };
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = cli.epochs {
        cfg.epochs = e;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<String, PetsError> {
    let mut cfg = resolve(cli)?;
    let text = match &cli.command {
        Command::Decompose => serde_json::to_string_pretty(&run::cmd_decompose(&cfg)?)?,
        Command::Train { resume } => {
            if resume.is_some() {
                cfg.resume = resume.clone();
            }
            let state = run::cmd_train(&cfg)?;
            serde_json::to_string_pretty(&serde_json::json!({
                "epochs": state.epoch,
                "best_epoch": state.best_epoch,
                "best_val_loss": state.best_val,
                "out": cfg.out,
            }))?
        }
        Command::Eval { checkpoint, predictions } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint.clone();
            }
            cfg.write_predictions |= *predictions;
            serde_json::to_string_pretty(&run::cmd_eval(&cfg)?)?
        }
        Command::ExportAttention { checkpoint, sample, channel } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint.clone();
            }
            serde_json::to_string_pretty(&run::cmd_export_attention(&cfg, *sample, *channel)?)?
        }
    };
    Ok(text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
