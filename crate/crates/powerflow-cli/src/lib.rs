//! Command-line front-end for the powerflow distribution-matching laboratory.
//!
//! `run` dispatches one of five subcommands — `train`, `compare`, `oracle`,
//! `mvsim`, `gradcheck` — each driven by a single flat-text config file, and
//! writes deterministic artifacts (a JSONL metrics stream, CSV summaries, an
//! SVG chart) into the configured output directory. Exit codes: 0 success,
//! 2 configuration error, 3 numerical divergence, 4 failed self-check.

pub mod artifacts;
pub mod chart;
pub mod commands;
pub mod config;

use std::fmt;
use std::path::{Path, PathBuf};

use powerflow_core::mvsim::MvError;
use powerflow_core::objectives::ObjectiveError;
use powerflow_core::oracle::OracleError;
use powerflow_core::policy::PolicyError;
use powerflow_core::trainer::TrainerError;

use chart::ChartError;
use config::{Command, ConfigError};

const USAGE: &str = "usage: powerflow <train|compare|oracle|mvsim|gradcheck> <config>";

/// Every failure mode, sorted by exit code: bad configuration (2), numerical
/// divergence (3), or a failed internal self-check (4).
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Config(String),
    Numerics(String),
    SelfCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerics(_) => 3,
            CliError::SelfCheck(_) => 4,
        }
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {}", one_line(m)),
            CliError::Numerics(m) => write!(f, "numerical failure: {}", one_line(m)),
            CliError::SelfCheck(m) => write!(f, "self-check failed: {}", one_line(m)),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Diverged { .. }
            | TrainerError::NonFiniteParam { .. }
            | TrainerError::NonFiniteGradient => CliError::Numerics(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::EmptySupport | OracleError::BracketFailure => {
                CliError::Numerics(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MvError> for CliError {
    fn from(e: MvError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ChartError> for CliError {
    fn from(e: ChartError) -> Self {
        CliError::SelfCheck(e.to_string())
    }
}

/// Run one subcommand. Prints progress lines to stdout on success and a
/// single diagnostic line to stderr on failure; returns the exit code.
pub fn run(argv: &[String]) -> i32 {
    match run_inner(argv) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn run_inner(argv: &[String]) -> Result<Vec<String>, CliError> {
    if argv.len() != 3 {
        return Err(CliError::Config(USAGE.to_string()));
    }
    let sub = Command::from_name(&argv[1])
        .ok_or_else(|| CliError::Config(format!("unknown subcommand `{}`; {USAGE}", argv[1])))?;
    let path = Path::new(&argv[2]);
    let cfg = config::parse_file(path)?;
    if cfg.command != sub {
        return Err(CliError::Config(format!(
            "config {} describes a `{}` experiment, but subcommand `{}` was given",
            path.display(),
            cfg.command.name(),
            sub.name(),
        )));
    }

    let out_dir = match std::env::var_os("POWERFLOW_OUT") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&cfg.out_dir),
    };
    let config_dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };

    // Everything is computed before the first write: a failing run must not
    // leave partial outputs behind.
    let (artifact_list, mut lines) = commands::execute(&cfg, &config_dir)?;

    std::fs::create_dir_all(&out_dir).map_err(|e| {
        CliError::Config(format!("cannot create output dir {}: {e}", out_dir.display()))
    })?;
    for artifact in &artifact_list {
        let target = out_dir.join(&artifact.name);
        std::fs::write(&target, &artifact.content)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", target.display())))?;
        lines.push(format!("wrote {}", target.display()));
    }
    Ok(lines)
}
