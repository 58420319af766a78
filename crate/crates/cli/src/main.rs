mod commands;
mod error;
mod report;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfrnn::config::{ExperimentConfig, Overrides};

use crate::commands::Start;
use crate::error::CliResult;

/// Mean-field RNN training experiments.
#[derive(Debug, Parser)]
#[command(name = "mfrnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides "out" in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override: the data seed for gen-data, the student seed otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the student width net.n.
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Debug, Args)]
struct DataDir {
    /// Directory holding data.csv and data.json (default: the output directory).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Jobs {
    /// Concurrent runs (default: MFRNN_JOBS, else the number of CPUs).
    #[arg(long, env = "MFRNN_JOBS")]
    jobs: Option<usize>,
}

impl Jobs {
    fn get(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample input sequences and label them with the teacher network.
    GenData(Common),
    /// Train one student network.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataDir,
        /// Continue from a snapshot; without a path, the latest one in the output directory.
        #[arg(long, num_args = 0..=1, value_name = "SNAPSHOT")]
        resume: Option<Option<PathBuf>>,
    },
    /// Train every (width, seed) pair of the sweep block.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataDir,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Train coupled subsampled networks against a wide reference.
    Couple {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataDir,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Compute stationarity quantities for the snapshots of a run or sweep.
    Diagnose {
        /// Run directory (with run.json) or sweep directory (with sweep.json)
        dir: PathBuf,
        /// Data directory; defaults to the one recorded in run.json
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write SVG plots and a text summary for a run, sweep or coupling directory.
    Report {
        /// Run, sweep or coupling output directory
        dir: PathBuf,
    },
}

fn load(common: &Common, seed_to_data: bool) -> CliResult<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if seed_to_data {
        if let Some(s) = common.seed {
            cfg.data.seed = s;
        }
    }
    cfg.apply(&Overrides {
        out: common.out.clone(),
        seed: if seed_to_data { None } else { common.seed },
        width: common.width,
    })?;
    let out = commands::output_dir(&cfg)?;
    Ok((cfg, out))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(common) => {
            let (cfg, out) = load(&common, true)?;
            commands::gen_data(&cfg, &out).map(|_| ())
        }
        Command::Train {
            common,
            data,
            resume,
        } => {
            let (cfg, out) = load(&common, false)?;
            let data = data.data.unwrap_or_else(|| out.clone());
            let start = match resume {
                None => Start::Fresh,
                Some(None) => Start::Latest,
                Some(Some(p)) => Start::Snapshot(p),
            };
            commands::train_cmd(&cfg, &out, &data, &start)
        }
        Command::Sweep { common, data, jobs } => {
            let (cfg, out) = load(&common, false)?;
            let data = data.data.unwrap_or_else(|| out.clone());
            commands::sweep_cmd(&cfg, &out, &data, jobs.get())
        }
        Command::Couple { common, data, jobs } => {
            let (cfg, out) = load(&common, false)?;
            let data = data.data.unwrap_or_else(|| out.clone());
            commands::couple_cmd(&cfg, &out, &data, jobs.get())
        }
        Command::Diagnose { dir, data } => commands::diagnose_cmd(&dir, data.as_deref()),
        Command::Report { dir } => report::report_cmd(&dir),
    }
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
