//! `lipdyn run <config>`: runs one scenario and writes its artifacts.
//!
//! Exit codes: 0 when every check passes, 2 when some check fails, 1 on
//! errors, including invalid configs.

mod artifacts;
mod config;
mod pipelines;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use artifacts::{families, sha256_hex, Artifacts, Check};
use config::Scenario;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("ConfigInvalid at `{field}` (line {line}, column {column}): {message}")]
    ConfigInvalid { field: String, line: usize, column: usize, message: String },
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("serialization failed: {0}")]
    Serialize(String),
    #[error("{0}")]
    Pipeline(String),
}

#[derive(Parser)]
#[command(name = "lipdyn", version, about = "Invariant manifolds, hyperbolicity certificates and connection graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline named in a JSON scenario config.
    Run {
        config: PathBuf,
        /// Artifact directory; defaults to `artifacts/<config stem>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seeds.main`.
        #[arg(long)]
        seed: Option<u64>,
        /// Validate the config and exit.
        #[arg(long)]
        check_only: bool,
    },
}

#[derive(Serialize)]
struct FamilySummary {
    family: String,
    total: usize,
    failed: usize,
}

#[derive(Serialize)]
struct Summary {
    pipeline: String,
    config_sha256: String,
    seed: u64,
    status: &'static str,
    checks_total: usize,
    checks_failed: usize,
    families: Vec<FamilySummary>,
    failed_checks: Vec<String>,
}

/// Number of failed checks, or an error.
fn run_scenario(path: &Path, out: Option<PathBuf>, seed: Option<u64>, check_only: bool) -> Result<usize, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::ConfigInvalid { field: String::new(), line: 0, column: 0, message: e.to_string() })?;
    let scenario = Scenario::parse(&text)?;
    if check_only {
        println!("config ok: pipeline {}", scenario.config.pipeline.name());
        return Ok(0);
    }
    let seed = seed.unwrap_or(scenario.config.seeds.main);
    let config_sha256 = sha256_hex(&bytes);
    let dir = out.unwrap_or_else(|| Path::new("artifacts").join(path.file_stem().unwrap_or_default()));
    let mut art = Artifacts::create(&dir)?;
    art.write_bytes("config.json", &bytes)?;
    let checks: Vec<Check> = pipelines::run(&scenario, seed, &mut art)?;
    let groups = families(&checks);
    for (fam, cs) in &groups {
        art.write_csv(&format!("checks_{fam}.csv"), cs, &["family", "name", "value", "limit", "pass"])?;
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.pass).map(|c| format!("{}: {}", c.family, c.name)).collect();
    let summary = Summary {
        pipeline: scenario.config.pipeline.name().to_string(),
        config_sha256: config_sha256.clone(),
        seed,
        status: if failed.is_empty() { "pass" } else { "fail" },
        checks_total: checks.len(),
        checks_failed: failed.len(),
        families: groups.iter().map(|(f, cs)| FamilySummary { family: f.clone(), total: cs.len(), failed: cs.iter().filter(|c| !c.pass).count() }).collect(),
        failed_checks: failed.clone(),
    };
    art.write_json("summary.json", &summary)?;
    let dir = art.finish(&config_sha256)?;
    println!("{}: {} checks, {} failed; artifacts in {}", summary.pipeline, summary.checks_total, summary.checks_failed, dir.display());
    for f in &failed {
        println!("FAIL {f}");
    }
    Ok(failed.len())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, seed, check_only } => match run_scenario(&config, out, seed, check_only) {
            Ok(0) => ExitCode::SUCCESS,
            Ok(_) => ExitCode::from(2),
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
