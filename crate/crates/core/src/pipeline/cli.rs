use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::{cmd_evaluate, cmd_generate, cmd_partition, cmd_report, cmd_train, cmd_warmup, RunConfig};
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "phoenix", version, about = "Federated diffusion training simulator")]
pub struct Cli {
    /// Run config JSON, or the name of a bundled preset (`desk`, `paper`).
    #[arg(long, global = true, default_value = "desk")]
    pub config: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split the training set across clients.
    Partition,
    /// Train the starting model on the shared pool.
    Warmup,
    /// Run federated training and evaluate the final model.
    Train,
    /// Sample from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A client's personal checkpoint to overlay.
        #[arg(long)]
        personal: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        count: usize,
    },
    /// Score a sample batch against the reference set.
    Evaluate {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Tabulate run summaries.
    Report { runs: Vec<PathBuf> },
}

/// Config file, then environment, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::load(&cli.config)?;
    config.apply_env()?;
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    let body = || -> Result<()> {
        match &cli.command {
            Command::Partition => {
                cmd_partition(&config)?;
            }
            Command::Warmup => {
                cmd_warmup(&config)?;
            }
            Command::Train => {
                let s = cmd_train(&config)?;
                println!("{}", serde_json::to_string_pretty(&s.report)?);
            }
            Command::Generate {
                checkpoint,
                personal,
                count,
            } => {
                cmd_generate(&config, checkpoint, personal.as_deref(), *count)?;
            }
            Command::Evaluate { samples, classifier } => {
                let r = cmd_evaluate(&config, samples, classifier.as_deref())?;
                println!("{}", serde_json::to_string_pretty(&r)?);
            }
            Command::Report { runs } => {
                cmd_report(&config, runs)?;
            }
        }
        Ok(())
    };
    match cli.workers {
        Some(0) => Err(Error::Config("--workers must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Fatal(e.to_string()))?
            .install(body),
        None => body(),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
