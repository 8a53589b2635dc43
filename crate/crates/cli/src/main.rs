//! Scenario-driven front end: `continuum verify <config>` runs the property
//! suites, `continuum run <config>` integrates and writes artifacts.
//! Exit codes: 0 pass, 1 check or step failure, 2 configuration error.

mod config;
mod runcmd;
mod verify;

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{resolve, ConfigError, ScenarioConfig};

#[derive(Parser)]
#[command(name = "continuum", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification checks for a scenario and write a report.
    Verify {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<String>,
        /// Seed for the randomized check sampling.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Uniform refinement multiplier (nodes * k, dt / k, steps * k).
        #[arg(long, default_value_t = 1)]
        refine: usize,
    },
    /// Integrate the scenario and write snapshots, conservation series,
    /// and a manifest.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<String>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        refine: usize,
    },
}

fn load(path: &PathBuf) -> Result<(ScenarioConfig, String), ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    Ok((ScenarioConfig::parse(&text)?, text))
}

fn cmd_verify(
    path: &PathBuf,
    output_dir: Option<&str>,
    seed: u64,
    refine: usize,
) -> anyhow::Result<i32> {
    let (config, _) = load(path)?;
    let resolved = resolve(&config, output_dir, refine)?;
    let checks = verify::run_checks(&resolved, seed)?;
    let all_pass = checks.iter().all(|c| c.pass);
    for c in &checks {
        println!(
            "{}: {} (value {:.3e}, tolerance {:.1e})",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.value,
            c.tolerance
        );
    }
    let dir = PathBuf::from(&resolved.output_dir);
    fs::create_dir_all(&dir)?;
    let report = json!({
        "scenario": resolved.scenario.name(),
        "seed": seed,
        "checks": checks,
        "passed": all_pass,
    });
    let mut f = fs::File::create(dir.join("verify_report.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&report)?)?;
    Ok(if all_pass { 0 } else { 1 })
}

fn cmd_run(
    path: &PathBuf,
    output_dir: Option<&str>,
    _seed: u64,
    refine: usize,
) -> anyhow::Result<i32> {
    let (config, text) = load(path)?;
    let resolved = resolve(&config, output_dir, refine)?;
    Ok(runcmd::cmd_run(&resolved, &text)?.exit)
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify {
            config,
            output_dir,
            seed,
            refine,
        } => cmd_verify(config, output_dir.as_deref(), *seed, *refine),
        Command::Run {
            config,
            output_dir,
            seed,
            refine,
        } => cmd_run(config, output_dir.as_deref(), *seed, *refine),
    };
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            if e.downcast_ref::<ConfigError>().is_some() {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}
