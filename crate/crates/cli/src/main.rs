//! `swarmap`: arena generation, episode runs, batch evaluation, training,
//! map analysis, trace replay and the environment server.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use swarmap_core::RewardCase;

#[derive(Debug, Parser)]
#[command(name = "swarmap", version, about = "Multi-agent exploration simulator and trainer")]
#[command(subcommand_negates_reqs = true, arg_required_else_help = true)]
pub struct Cli {
    /// Serve the environment protocol on ADDR instead of running a subcommand.
    #[arg(long, value_name = "ADDR", required = true)]
    pub serve: Option<String>,

    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON file with optional `env` and `train` sections, or a previous run's manifest.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Output directory; defaults to `runs/<subcommand>`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[arg(long = "reward-case", global = true, value_name = "CASE", value_parser = parse_reward_case)]
    pub reward_case: Option<RewardCase>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a connected arena and write `arena.json`.
    Generate,
    /// Run one episode and write its trace and per-step metrics.
    Run {
        /// Policy names or checkpoint paths, one per agent or a single shared one.
        #[arg(long, default_value = "greedy")]
        policy: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate policies over many random arenas.
    Eval {
        #[arg(long, default_value = "greedy")]
        policy: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 200)]
        runs: usize,
        /// Parallel runs; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Train actors and the shared critic.
    Train {
        #[arg(long, value_enum, default_value_t = Preset::Paper)]
        preset: Preset,
        /// Override the number of training iterations.
        #[arg(long)]
        iterations: Option<usize>,
        /// Override the steps per episode.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print frontier path statistics for a map seen from one cell.
    Analyze {
        /// Map as JSON or ASCII (`?` unknown, `.` free, `#` occupied).
        map: PathBuf,
        /// Agent cell as `row,col`.
        #[arg(long, value_parser = parse_position)]
        position: [i32; 2],
    },
    /// Re-simulate a trace, check it matches, and write its metrics.
    Replay { trace: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Published hyperparameters on the default arena.
    Paper,
    /// Small networks on a 6×6 two-agent arena.
    Lite,
}

fn parse_reward_case(s: &str) -> Result<RewardCase, String> {
    s.parse().map_err(|e: swarmap_core::Error| e.to_string())
}

fn parse_position(s: &str) -> Result<[i32; 2], String> {
    let bad = || format!("expected `row,col`, got `{s}`");
    let (r, c) = s.split_once(',').ok_or_else(bad)?;
    Ok([r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?])
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
