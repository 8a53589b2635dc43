//! Time integration command: step loop, CSV snapshots, conservation series,
//! and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

use continuum_core::conservation::{current_field, noether_divergence, SymmetryGenerator};
use continuum_core::dynamics::induced_constraint;
use continuum_core::fields::{ConfigurationField, SpaceTimeGrid};
use continuum_core::integrator::{discrete_energy, step};
use continuum_core::material::MaterialModel;
use continuum_core::Error;

use crate::config::Resolved;

#[derive(Debug, Clone, Serialize)]
struct SeriesEntry {
    step: usize,
    time: f64,
    energy: f64,
    constraint_max: f64,
}

#[derive(Debug, Clone, Serialize)]
struct CurrentEntry {
    level: usize,
    time: f64,
    summed_density: f64,
    max_divergence: f64,
}

pub struct RunOutcome {
    pub exit: i32,
}

fn default_generator(dim: usize) -> SymmetryGenerator {
    if dim == 2 {
        SymmetryGenerator::from_stream_function(
            Arc::new(|x: &[f64]| vec![x[0].cos() * x[1].sin(), x[0].sin() * x[1].cos()]),
            Arc::new(|x: &[f64]| {
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        -x[0].sin() * x[1].sin(),
                        x[0].cos() * x[1].cos(),
                        x[0].cos() * x[1].cos(),
                        -x[0].sin() * x[1].sin(),
                    ],
                )
            }),
        )
    } else {
        SymmetryGenerator::constant_relabeling(vec![1.0; dim])
    }
}

fn write_level_csv(
    path: &Path,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> anyhow::Result<()> {
    let dim = grid.n_space();
    let nc = field.n_comp;
    let mut out = String::new();
    for k in 0..dim {
        out.push_str(&format!("x{k},"));
    }
    for a in 0..nc {
        out.push_str(&format!("phi{a}"));
        if a + 1 < nc {
            out.push(',');
        }
    }
    let has_lambda = field.levels[level].lambda.is_some();
    if has_lambda {
        out.push_str(",lambda");
    }
    out.push('\n');
    for node in 0..grid.n_nodes() {
        let multi = grid.node_multi(node);
        let x = grid.node_coords(&multi);
        for v in &x {
            out.push_str(&format!("{v:.16e},"));
        }
        let phi = field.phi_at(grid, level, node);
        for a in 0..nc {
            out.push_str(&format!("{:.16e}", phi[a]));
            if a + 1 < nc {
                out.push(',');
            }
        }
        if has_lambda {
            let lam = field.lambda_at_node(grid, level, &multi).unwrap_or(0.0);
            out.push_str(&format!(",{lam:.16e}"));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn cmd_run(resolved: &Resolved, config_echo: &str) -> anyhow::Result<RunOutcome> {
    let steps = match resolved.steps {
        Some(s) => s,
        None => {
            anyhow::bail!(crate::config::ConfigError(format!(
                "scenario {} has no integration block",
                resolved.scenario.name()
            )))
        }
    };
    let model: MaterialModel = resolved.model();
    let grid = resolved.grid()?;
    let settings = resolved.settings();
    let dir = PathBuf::from(&resolved.output_dir);
    fs::create_dir_all(&dir)?;

    let mut field = resolved.initial_field(&grid, &model)?;
    let mut series = Vec::new();
    let mut failed_step = None;
    let mut failure_message = None;
    for s in 0..steps {
        match step(&model, &field, &grid, &settings, resolved.constrained) {
            Ok(next) => field = next,
            Err(e @ Error::NewtonDiverged { .. }) => {
                failed_step = Some(s);
                failure_message = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e.into()),
        }
        let slab = field.levels.len() - 2;
        let constraint_max = if resolved.constrained {
            induced_constraint(&model, &grid, &field, slab + 1)?
                .iter()
                .fold(0.0f64, |m, c| m.max(c.abs()))
        } else {
            0.0
        };
        series.push(SeriesEntry {
            step: s,
            time: (s + 1) as f64 * grid.dt,
            energy: discrete_energy(&model, &grid, &field, slab)?,
            constraint_max,
        });
    }

    let levels = field.levels.len();
    if resolved.constrained && levels >= 3 {
        // The stepper leaves the first and last levels without multipliers;
        // fill them from their neighbors so every snapshot carries one.
        if field.levels[0].lambda.is_none() {
            field.levels[0].lambda = field.levels[1].lambda.clone();
        }
        if field.levels[levels - 1].lambda.is_none() {
            field.levels[levels - 1].lambda = field.levels[levels - 2].lambda.clone();
        }
    }
    let mut snapshots = Vec::new();
    let mut snapshot_levels: Vec<usize> = (0..levels).step_by(resolved.cadence).collect();
    if snapshot_levels.last() != Some(&(levels - 1)) {
        snapshot_levels.push(levels - 1);
    }
    for &level in &snapshot_levels {
        let name = format!("snapshot_{level:05}.csv");
        write_level_csv(&dir.join(&name), &grid, &field, level)?;
        snapshots.push(name);
    }

    let gen = default_generator(resolved.dim);
    let mut currents = Vec::new();
    let mut level = resolved.cadence.max(1);
    while level + 1 < levels {
        let current = current_field(&model, &grid, &field, &gen, level)?;
        let summed: f64 = current.j0.iter().flatten().sum();
        let div = noether_divergence(&model, &grid, &field, &gen, level)?;
        let max_div = div.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        currents.push(CurrentEntry {
            level,
            time: level as f64 * grid.dt,
            summed_density: summed,
            max_divergence: max_div,
        });
        level += resolved.cadence;
    }

    let conservation = json!({
        "series": series,
        "currents": currents,
    });
    let mut f = fs::File::create(dir.join("conservation.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&conservation)?)?;

    let manifest = json!({
        "metadata": {
            "created_unix": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)?
                .as_secs(),
            "version": env!("CARGO_PKG_VERSION"),
        },
        "data": {
            "scenario": resolved.scenario.name(),
            "resolved_config": resolved,
            "config_text": config_echo,
            "requested_steps": steps,
            "completed_steps": series.len(),
            "failed_step": failed_step,
            "failure": failure_message,
            "levels": levels,
            "snapshots": snapshots,
            "files": ["conservation.json"],
            "final_energy": series.last().map(|e| e.energy),
            "max_constraint": series.iter().fold(0.0f64, |m, e| m.max(e.constraint_max)),
        },
    });
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    writeln!(f, "{}", serde_json::to_string_pretty(&manifest)?)?;

    if let Some(s) = failed_step {
        eprintln!("run failed: Newton divergence at step {s}");
        return Ok(RunOutcome { exit: 1 });
    }
    println!(
        "run complete: {} steps, {} snapshots in {}",
        series.len(),
        snapshots.len(),
        dir.display()
    );
    Ok(RunOutcome { exit: 0 })
}
