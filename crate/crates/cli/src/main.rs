//! `mclnf`: meta-train shared initializations, adapt them to signals under a
//! chosen continual-learning strategy, sweep strategy comparisons, inspect
//! checkpoints, and run the built-in oracle suite.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod data;

#[derive(Parser)]
#[command(name = "mclnf", version, about = "Modular meta-continual neural fields")]
struct Cli {
    /// Override the config's RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a shared initialization (strategy chosen by the config).
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
        /// Resume from a checkpoint (config hashes must match).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the config hash disagrees.
        #[arg(long)]
        force: bool,
    },
    /// Test-time optimization of one signal under one strategy.
    Adapt {
        /// Starting checkpoint; omitted = fresh random initialization.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Signal file/directory, or synthetic:<family>[:<test index>].
        #[arg(long)]
        signal: String,
        #[arg(long, default_value = "OURS-MIM")]
        strategy: String,
        /// Eval schedule, e.g. 1,2,4,…,4096 (overrides the config).
        #[arg(long)]
        steps: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write reconstructed signals at every eval step.
        #[arg(long)]
        dump_recon: bool,
    },
    /// Run the configured strategy sweep and merge everything into one CSV.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print a checkpoint's architecture, parameter counts, and position.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Run the gradient/Fisher/KL oracle suites.
    Selftest {
        /// Trim the Monte-Carlo sample counts.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::MetaTrain {
            config,
            resume,
            force,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            commands::meta_train(&cfg, resume.as_deref(), force)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Adapt {
            ckpt,
            signal,
            strategy,
            steps,
            config,
            dump_recon,
        } => {
            let mut cfg = match config {
                Some(p) => load_config(&p, cli.seed)?,
                None => {
                    let mut c = mclnf_core::config::RunConfig::default();
                    if let Some(s) = cli.seed {
                        c.seed = s;
                    }
                    c
                }
            };
            if let Some(s) = steps {
                cfg.eval_steps = s;
                cfg.validate().context("bad --steps")?;
            }
            commands::adapt(&cfg, ckpt.as_deref(), &signal, &strategy, dump_recon)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { config } => {
            let cfg = load_config(&config, cli.seed)?;
            commands::compare(&cfg)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect { ckpt } => {
            commands::inspect(&ckpt)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { quick } => {
            let seed = cli.seed.unwrap_or(42);
            let checks = mclnf_core::selftest::run_all(quick, seed)?;
            let mut ok = true;
            for c in &checks {
                let tag = if c.pass { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: {}", c.name, c.detail);
                ok &= c.pass;
            }
            if ok {
                println!("selftest: all {} checks passed", checks.len());
                Ok(ExitCode::SUCCESS)
            } else {
                bail!("selftest failed");
            }
        }
    }
}

fn load_config(path: &std::path::Path, seed: Option<u64>) -> Result<mclnf_core::config::RunConfig> {
    let mut cfg = mclnf_core::config::RunConfig::from_path(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}
