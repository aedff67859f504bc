// Copyright 2026 The sdplab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Experiment driver: config parsing, subcommands, metrics logging and
//! SVG reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::RunOptions;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "sdplab", version, about = "Iterative pruning with self-distillation")]
pub struct Cli {
    /// INI experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Sweep worker threads (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic dataset and its manifest.
    GenData,
    /// Train the teacher on the output directory's dataset.
    TrainTeacher,
    /// Prune a student of the trained teacher.
    PruneRun,
    /// Run the method × loss-mode × seed grid.
    Sweep,
    /// Render SVG charts from metrics CSVs.
    Report {
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    ExperimentConfig::from_file(path)
}

fn options(cli: &Cli, cfg: &ExperimentConfig) -> CliResult<RunOptions> {
    let jobs = match cli.jobs {
        Some(0) => return Err(CliError::Config("--jobs must be at least 1".into())),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    Ok(RunOptions {
        out: cli.out.clone().unwrap_or_else(|| cfg.output.clone()),
        force: cli.force,
        seed: cli.seed,
        jobs,
    })
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    if let Command::Report { csvs } = &cli.command {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
        for p in report::cmd_report(csvs, &out, cli.force)? {
            println!("{}", p.display());
        }
        return Ok(());
    }
    let cfg = load_config(cli)?;
    let opts = options(cli, &cfg)?;
    match cli.command {
        Command::GenData => {
            let p = commands::cmd_gen_data(&cfg, &opts)?;
            println!("{}", p.display());
        }
        Command::TrainTeacher => {
            let t = commands::cmd_train_teacher(&cfg, &opts)?;
            println!("teacher dev accuracy {:.4} (epoch {})", t.epochs[t.best_epoch - 1].dev.accuracy, t.best_epoch);
        }
        Command::PruneRun => {
            let s = commands::cmd_prune_run(&cfg, &opts)?;
            println!("{}: remaining {:.4} dev accuracy {:.4}", s.run_id, s.final_remaining, s.final_accuracy);
        }
        Command::Sweep => {
            let o = commands::cmd_sweep(&cfg, &opts)?;
            let failed = o.failed();
            println!("{} cells, {failed} failed", o.cells.len());
            if failed > 0 {
                return Err(CliError::PartialSweep {
                    failed,
                    total: o.cells.len(),
                });
            }
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// Parses arguments, runs, and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class_name());
            e.exit_code()
        }
    }
}
