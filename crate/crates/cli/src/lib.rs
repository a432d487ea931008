//! Command-line harness: training, evaluation, ablation grids, plots and
//! dataset generation over the synthetic tasks.

pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod plot;
pub mod report;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliResult;
use crate::report::out_root;

#[derive(Debug, Parser)]
#[command(name = "hoi", version, about = "Train, evaluate and ablate online interaction models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus overrides that mirror its keys.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run config (TOML).
    pub config: PathBuf,
    /// Override any key, e.g. `--set train.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub memory: Option<String>,
    #[arg(long)]
    pub fusion: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> CliResult<RunConfig> {
        let mut overrides = self.set.clone();
        for (k, v) in [("mode", &self.mode), ("memory", &self.memory), ("fusion", &self.fusion), ("model", &self.model)] {
            if let Some(v) = v {
                overrides.push(format!("{k}={v:?}"));
            }
        }
        RunConfig::load(&self.config, &overrides)
    }

    fn seeds(&self, cfg: &RunConfig) -> Vec<u64> {
        self.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s])
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the configured model for each seed.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the run's checkpoint when one exists.
        #[arg(long)]
        resume: bool,
        /// Stop once this many optimiser steps are done.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate trained checkpoints and write a metric report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Score the validation targets against themselves.
        #[arg(long)]
        ground_truth: bool,
    },
    /// Run an ablation grid and write comparison tables.
    Ablate {
        /// Grid file (TOML).
        grid: PathBuf,
        /// Execute runs in an order shuffled by this seed.
        #[arg(long)]
        shuffle: Option<u64>,
        /// Retrain even when a finished checkpoint exists.
        #[arg(long)]
        fresh: bool,
    },
    /// Render figures from report files.
    Plot {
        /// JSONL reports (training logs, eval, ablation, trajectories).
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output directory (default: `<output root>/figures`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset with a manifest.
    Datagen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: `<output root>/<name>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { cfg: args, resume, until } => {
            let cfg = args.load()?;
            eprintln!("config {} hash {}", cfg.name, cfg.hash());
            for seed in args.seeds(&cfg) {
                let s = run::train_seed(&cfg, seed, resume, until)?;
                let from = s.resumed_from.map_or_else(String::new, |f| format!(" (resumed at {f})"));
                println!(
                    "seed {seed}: step {} loss {:.6} params {}{from} -> {}",
                    s.step,
                    s.final_loss,
                    s.params,
                    s.checkpoint.display()
                );
            }
        }
        Command::Eval { cfg: args, ground_truth } => {
            let cfg = args.load()?;
            let rows = args
                .seeds(&cfg)
                .into_iter()
                .map(|seed| run::eval_seed(&cfg, seed, ground_truth))
                .collect::<CliResult<Vec<_>>>()?;
            let path = run::write_eval_reports(&cfg, &rows, ground_truth)?;
            for r in &rows {
                let m: Vec<String> = run::metric_names(cfg.task)
                    .iter()
                    .map(|n| format!("{n} {:.4}", r.metrics[*n]))
                    .collect();
                println!("seed {}: {} (causality guard: {})", r.seed, m.join(", "), r.causality_guard);
            }
            println!("report {}", path.display());
        }
        Command::Ablate { grid, shuffle, fresh } => {
            let g = ablate::Grid::load(&grid)?;
            let report = ablate::run_grid(&g, shuffle, fresh, |r| match &r.error {
                Some(e) => eprintln!("[{}] {} seed {}: failed: {e}", r.family, r.cell, r.seed),
                None => eprintln!("[{}] {} seed {}: done", r.family, r.cell, r.seed),
            });
            let dir = ablate::write_reports(&g, &report)?;
            print!("{}", ablate::tables(g.task, &report));
            println!("reports in {}", dir.display());
        }
        Command::Plot { reports, out } => {
            let out = out.unwrap_or_else(|| out_root().join("figures"));
            let (written, warnings) = plot::plot_reports(&reports, &out)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Datagen { cfg: args, out } => {
            let cfg = args.load()?;
            let dir = out.unwrap_or_else(|| out_root().join(&cfg.name).join("data"));
            let m = data::datagen(&cfg, &dir)?;
            println!("{} files, manifest {} in {}", m.files.len(), m.manifest_hash, dir.display());
        }
    }
    Ok(())
}

/// Runs the parsed command and maps failures to exit codes.
pub fn main_with(cli: Cli) -> i32 {
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
