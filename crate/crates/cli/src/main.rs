//! `mobiflow`: weighted-Wasserstein distances, minimizing-movement runs and
//! contraction checks from flat configuration files.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{JkoKind, Lemma};
use config::Config;

#[derive(Parser)]
#[command(name = "mobiflow", version, about = "Gradient flows in weighted Wasserstein metrics")]
struct Cli {
    /// Worker threads (MOBIFLOW_THREADS takes precedence).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Distance between two densities; prints distance, action, residual, iterations.
    Distance {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Minimizing-movement run.
    Jko {
        #[arg(value_enum)]
        kind: Flow,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Differential inequality along a curve, or the step-level inequality.
    EviCheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-sample functional inequality checks on a random field battery.
    LemmaCheck {
        #[arg(long)]
        which: Lemma,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Direct PDE solve used as an oracle.
    Reference {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Summarize the CSV files of an output directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Flow {
    Ks,
    Ch,
}

fn load(path: Option<&Path>) -> anyhow::Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}

fn init_threads(flag: Option<usize>) -> anyhow::Result<()> {
    let env = std::env::var("MOBIFLOW_THREADS").ok();
    let n = match env.as_deref().map(str::trim) {
        Some(v) if !v.is_empty() => Some(
            v.parse::<usize>()
                .map_err(|_| anyhow::anyhow!("MOBIFLOW_THREADS must be a positive integer, got '{v}'"))?,
        ),
        _ => flag,
    };
    if let Some(n) = n {
        if n == 0 {
            anyhow::bail!("thread count must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<commands::Failures> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Distance { config } => commands::distance(&load(config.as_deref())?),
        Command::Jko { kind, config } => {
            let kind = match kind {
                Flow::Ks => JkoKind::Ks,
                Flow::Ch => JkoKind::Ch,
            };
            commands::jko(kind, &load(config.as_deref())?)
        }
        Command::EviCheck { config } => commands::evi_check(&load(config.as_deref())?),
        Command::LemmaCheck { which, config } => commands::lemma_check(which, &load(config.as_deref())?),
        Command::Reference { config } => commands::reference(&load(config.as_deref())?),
        Command::Report { dir } => commands::report(&dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(fails) if fails.is_empty() => ExitCode::SUCCESS,
        Ok(fails) => {
            for f in &fails {
                eprintln!("FAILED: {f}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
