//! `ma2t` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error, 3 runtime
//! or numeric failure. Every failure prints one line to standard error:
//!
//! ```text
//! ma2t: error kind=<usage|config|runtime> [key=<config key>] reason="<message>"
//! ```

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use ma2t::attacks::{AttackMethod, Norm, Objective};
use ma2t::trainer::TrainMethod;

use config::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "ma2t", version, about = "Module-wise adversarial training toolkit for a toy driving pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Root directory for run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads for independent jobs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Replace an existing run directory.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and validation splits.
    GenData,
    /// Clean training of a freshly initialized pipeline.
    Pretrain {
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Adversarial fine-tuning of a pretrained checkpoint.
    Finetune {
        #[arg(long, value_parser = parse_method)]
        method: TrainMethod,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
    },
    /// Evaluate one attack against a checkpoint.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: Option<AttackMethod>,
        #[arg(long)]
        norm: Option<Norm>,
        #[arg(long)]
        objective: Option<Objective>,
        /// Image budget (l-infinity; l1/l2 budgets derive from it).
        #[arg(long, allow_negative_numbers = true)]
        eps: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// White-box robustness matrix.
    EvalWhitebox {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Transfer attacks from surrogate checkpoints.
    EvalBlackbox {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `name=path`, repeatable.
        #[arg(long = "surrogate", required = true)]
        surrogates: Vec<String>,
    },
    /// Natural-corruption robustness over every kind and severity.
    EvalCorruption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Closed-loop driving with and without a universal perturbation crafted on the first checkpoint.
    Simulate {
        /// `name=path`, repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        /// Data the universal perturbation is optimized on.
        #[arg(long)]
        data: PathBuf,
    },
    /// Merge the report bundles of earlier runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Attack { .. } => "attack",
            Command::EvalWhitebox { .. } => "eval-whitebox",
            Command::EvalBlackbox { .. } => "eval-blackbox",
            Command::EvalCorruption { .. } => "eval-corruption",
            Command::Simulate { .. } => "simulate",
            Command::Report { .. } => "report",
        }
    }
}

fn parse_method(s: &str) -> Result<TrainMethod, String> {
    match s.parse::<TrainMethod>() {
        Ok(TrainMethod::Clean) => Err("fine-tuning methods are ma2t, fat, pgd-l1, pgd-l2, pgd-linf".into()),
        Ok(m) => Ok(m),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(ConfigError),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn line(&self) -> String {
        let one_line = |s: &str| format!("{:?}", s.trim());
        match self {
            Failure::Usage(r) => format!("ma2t: error kind=usage reason={}", one_line(r)),
            Failure::Config(ConfigError { key: Some(k), reason }) => {
                format!("ma2t: error kind=config key={k} reason={}", one_line(reason))
            }
            Failure::Config(ConfigError { key: None, reason }) => format!("ma2t: error kind=config reason={}", one_line(reason)),
            Failure::Runtime(r) => format!("ma2t: error kind=runtime reason={}", one_line(r)),
        }
    }
}

impl From<ma2t::Error> for Failure {
    fn from(e: ma2t::Error) -> Self {
        match e {
            ma2t::Error::Config { .. } => Failure::Config(ConfigError::from_core(e)),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            println!("{}", Cli::command().render_usage());
            let first = e.to_string();
            let reason = first.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return fail(Failure::Usage(reason));
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    eprintln!("{}", f.line());
    ExitCode::from(f.code())
}
