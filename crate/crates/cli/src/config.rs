//! Scenario configuration: TOML schema, validation, and translation into
//! core models, grids, and initial conditions.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use continuum_core::fields::{Boundary, ConfigurationField, SpaceTimeGrid};
use continuum_core::geometry::MetricField;
use continuum_core::integrator::{initialize_velocity, LinearSolver, SolverSettings};
use continuum_core::material::{BarotropicLaw, MaterialModel, StoredEnergy};

pub const TAU: f64 = std::f64::consts::TAU;

#[derive(Debug, thiserror::Error)]
#[error("config error: {0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "elastic_bar_1d")]
    ElasticBar1d,
    #[serde(rename = "barotropic_gas_2d")]
    BarotropicGas2d,
    #[serde(rename = "incompressible_2d")]
    Incompressible2d,
    #[serde(rename = "metric_check_polar")]
    MetricCheckPolar,
    #[serde(rename = "custom")]
    Custom,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::ElasticBar1d => "elastic_bar_1d",
            Scenario::BarotropicGas2d => "barotropic_gas_2d",
            Scenario::Incompressible2d => "incompressible_2d",
            Scenario::MetricCheckPolar => "metric_check_polar",
            Scenario::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum EnergyConfig {
    BarotropicQuadratic { k: f64 },
    BarotropicLog,
    Constant { w0: f64 },
    Stvenant { lambda: f64, mu: f64 },
    Neohookean { mu: f64, lambda: f64 },
}

impl EnergyConfig {
    fn build(&self) -> StoredEnergy {
        match self {
            EnergyConfig::BarotropicQuadratic { k } => {
                StoredEnergy::Barotropic(BarotropicLaw::Quadratic { k: *k })
            }
            EnergyConfig::BarotropicLog => StoredEnergy::Barotropic(BarotropicLaw::LogType),
            EnergyConfig::Constant { w0 } => StoredEnergy::Constant(*w0),
            EnergyConfig::Stvenant { lambda, mu } => StoredEnergy::StVenant {
                lambda: *lambda,
                mu: *mu,
            },
            EnergyConfig::Neohookean { mu, lambda } => StoredEnergy::NeoHookean {
                mu: *mu,
                lambda: *lambda,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricConfig {
    Euclidean,
    Polar,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialConfig {
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub energy: EnergyConfig,
    pub base_metric: Option<MetricConfig>,
    pub fiber_metric: Option<MetricConfig>,
}

fn default_rho() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: Option<usize>,
    pub nodes: Option<usize>,
    pub dt: Option<f64>,
    /// Chart extent per axis, default [0, 2 pi].
    pub extent: Option<[f64; 2]>,
    /// "periodic" or "fixed"; default depends on the scenario.
    pub boundary: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub newton_tol: Option<f64>,
    pub max_newton: Option<usize>,
    /// "conjugate_gradient" or "dense_lu".
    pub linear_solver: Option<String>,
    pub cg_tol: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationConfig {
    pub steps: usize,
    pub constrained: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub amplitude: Option<f64>,
    pub mode: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Snapshot and conservation-series cadence in time levels.
    pub cadence: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub material: Option<MaterialConfig>,
    pub grid: Option<GridConfig>,
    pub solver: Option<SolverConfig>,
    pub integration: Option<IntegrationConfig>,
    pub initial: Option<InitialConfig>,
    pub diagnostics: Option<DiagnosticsConfig>,
    pub output: Option<OutputConfig>,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }
}

/// A validated configuration with every default filled in.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub scenario: Scenario,
    pub dim: usize,
    pub nodes: usize,
    pub dt: f64,
    pub extent: [f64; 2],
    pub periodic: bool,
    pub rho: f64,
    pub energy: EnergyConfig,
    pub base_metric: MetricConfig,
    pub fiber_metric: MetricConfig,
    pub constrained: bool,
    pub steps: Option<usize>,
    pub amplitude: f64,
    pub mode: usize,
    pub cadence: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub linear_solver: String,
    pub cg_tol: f64,
    /// Environment, not experiment data: kept out of the manifest so
    /// repeated runs into different directories stay comparable.
    #[serde(skip_serializing)]
    pub output_dir: String,
}

struct Defaults {
    dim: usize,
    nodes: usize,
    dt: f64,
    periodic: bool,
    energy: EnergyConfig,
    constrained: bool,
    amplitude: f64,
    mode: usize,
    steps: usize,
}

fn defaults(scenario: Scenario) -> Option<Defaults> {
    match scenario {
        Scenario::ElasticBar1d => Some(Defaults {
            dim: 1,
            nodes: 64,
            dt: 0.02,
            periodic: false,
            energy: EnergyConfig::Stvenant {
                lambda: 1.0,
                mu: 0.5,
            },
            constrained: false,
            amplitude: 0.02,
            mode: 2,
            steps: 200,
        }),
        Scenario::BarotropicGas2d => Some(Defaults {
            dim: 2,
            nodes: 32,
            dt: 0.04,
            periodic: true,
            energy: EnergyConfig::BarotropicQuadratic { k: 1.0 },
            constrained: false,
            amplitude: 0.02,
            mode: 1,
            steps: 200,
        }),
        Scenario::Incompressible2d => Some(Defaults {
            dim: 2,
            nodes: 32,
            dt: 0.01,
            periodic: true,
            energy: EnergyConfig::Constant { w0: 0.0 },
            constrained: true,
            amplitude: 1.0,
            mode: 1,
            steps: 500,
        }),
        Scenario::MetricCheckPolar | Scenario::Custom => None,
    }
}

pub fn resolve(
    config: &ScenarioConfig,
    output_override: Option<&str>,
    refine: usize,
) -> Result<Resolved, ConfigError> {
    if refine == 0 {
        return err("--refine must be at least 1");
    }
    let d = defaults(config.scenario);
    let grid = config.grid.clone().unwrap_or(GridConfig {
        dim: None,
        nodes: None,
        dt: None,
        extent: None,
        boundary: None,
    });

    let (dim, nodes, dt, periodic, energy, constrained, amplitude, mode, default_steps) =
        match (&d, config.scenario) {
            (Some(d), _) => (
                grid.dim.unwrap_or(d.dim),
                grid.nodes.unwrap_or(d.nodes),
                grid.dt.unwrap_or(d.dt),
                d.periodic,
                config
                    .material
                    .as_ref()
                    .map(|m| m.energy.clone())
                    .unwrap_or_else(|| d.energy.clone()),
                config
                    .integration
                    .as_ref()
                    .and_then(|i| i.constrained)
                    .unwrap_or(d.constrained),
                config
                    .initial
                    .as_ref()
                    .and_then(|i| i.amplitude)
                    .unwrap_or(d.amplitude),
                config
                    .initial
                    .as_ref()
                    .and_then(|i| i.mode)
                    .unwrap_or(d.mode),
                Some(d.steps),
            ),
            (None, Scenario::MetricCheckPolar) => (
                2,
                grid.nodes.unwrap_or(16),
                grid.dt.unwrap_or(0.01),
                false,
                EnergyConfig::Constant { w0: 0.0 },
                false,
                0.0,
                1,
                None,
            ),
            (None, Scenario::Custom) => {
                let material = match &config.material {
                    Some(m) => m,
                    None => return err("custom scenario requires a [material] section"),
                };
                let dim = match grid.dim {
                    Some(d) => d,
                    None => return err("custom scenario requires grid.dim"),
                };
                let nodes = match grid.nodes {
                    Some(n) => n,
                    None => return err("custom scenario requires grid.nodes"),
                };
                let dt = match grid.dt {
                    Some(t) => t,
                    None => return err("custom scenario requires grid.dt"),
                };
                (
                    dim,
                    nodes,
                    dt,
                    grid.boundary.as_deref() != Some("fixed"),
                    material.energy.clone(),
                    config
                        .integration
                        .as_ref()
                        .and_then(|i| i.constrained)
                        .unwrap_or(false),
                    config
                        .initial
                        .as_ref()
                        .and_then(|i| i.amplitude)
                        .unwrap_or(0.02),
                    config.initial.as_ref().and_then(|i| i.mode).unwrap_or(1),
                    None,
                )
            }
            _ => unreachable!(),
        };

    let periodic = match grid.boundary.as_deref() {
        None => periodic,
        Some("periodic") => true,
        Some("fixed") => false,
        Some(other) => return err(format!("unknown boundary kind {other:?}")),
    };

    let nodes = nodes * refine;
    let dt = dt / refine as f64;

    if dim == 0 || dim > 3 {
        return err(format!("grid dimension {dim} outside 1..=3"));
    }
    if nodes < 3 {
        return err(format!("grid needs at least 3 nodes per axis, got {nodes}"));
    }
    if !(dt > 0.0) {
        return err(format!("time step must be positive, got {dt}"));
    }
    let extent = grid
        .extent
        .unwrap_or(if config.scenario == Scenario::MetricCheckPolar {
            [1.0, 2.0]
        } else {
            [0.0, TAU]
        });
    if !(extent[1] > extent[0]) {
        return err(format!("empty chart extent {extent:?}"));
    }
    if amplitude < 0.0 {
        return err(format!("initial amplitude must be nonnegative, got {amplitude}"));
    }
    if mode == 0 {
        return err("initial mode must be at least 1");
    }

    let material = config.material.as_ref();
    let rho = material.map(|m| m.rho).unwrap_or(1.0);
    if !(rho > 0.0) {
        return err(format!("density must be positive, got {rho}"));
    }
    let base_metric = material
        .and_then(|m| m.base_metric)
        .unwrap_or(if config.scenario == Scenario::MetricCheckPolar {
            MetricConfig::Polar
        } else {
            MetricConfig::Euclidean
        });
    let fiber_metric = material
        .and_then(|m| m.fiber_metric)
        .unwrap_or(MetricConfig::Euclidean);
    if base_metric == MetricConfig::Polar || fiber_metric == MetricConfig::Polar {
        if dim != 2 {
            return err("the polar metric is two-dimensional");
        }
        if base_metric == MetricConfig::Polar && extent[0] <= 0.0 {
            return err("polar base chart needs extent with r > 0");
        }
    }

    let solver = config.solver.clone().unwrap_or(SolverConfig {
        newton_tol: None,
        max_newton: None,
        linear_solver: None,
        cg_tol: None,
    });
    let linear_solver = solver
        .linear_solver
        .unwrap_or_else(|| "conjugate_gradient".into());
    if linear_solver != "conjugate_gradient" && linear_solver != "dense_lu" {
        return err(format!("unknown linear solver {linear_solver:?}"));
    }
    let newton_tol = solver.newton_tol.unwrap_or(1e-10);
    if !(newton_tol > 0.0) {
        return err("newton_tol must be positive");
    }

    let steps = config
        .integration
        .as_ref()
        .map(|i| i.steps * refine)
        .or(default_steps.map(|s| s * refine));

    let cadence = config
        .diagnostics
        .as_ref()
        .and_then(|c| c.cadence)
        .unwrap_or(10);
    if cadence == 0 {
        return err("diagnostics cadence must be at least 1");
    }

    let output_dir = output_override
        .map(str::to_string)
        .or_else(|| config.output.as_ref().and_then(|o| o.dir.clone()))
        .unwrap_or_else(|| "out".into());

    Ok(Resolved {
        scenario: config.scenario,
        dim,
        nodes,
        dt,
        extent,
        periodic,
        rho,
        energy,
        base_metric,
        fiber_metric,
        constrained,
        steps,
        amplitude,
        mode,
        cadence,
        newton_tol,
        max_newton: solver.max_newton.unwrap_or(50),
        linear_solver,
        cg_tol: solver.cg_tol.unwrap_or(1e-12),
        output_dir,
    })
}

fn metric(kind: MetricConfig, dim: usize) -> MetricField {
    match kind {
        MetricConfig::Euclidean => MetricField::euclidean(dim),
        MetricConfig::Polar => MetricField::polar(),
    }
}

impl Resolved {
    pub fn model(&self) -> MaterialModel {
        MaterialModel::uniform(
            self.rho,
            self.energy.build(),
            metric(self.base_metric, self.dim),
            metric(self.fiber_metric, self.dim),
        )
    }

    pub fn grid(&self) -> Result<SpaceTimeGrid, ConfigError> {
        let boundary = if self.periodic {
            Boundary::Periodic
        } else {
            Boundary::Fixed
        };
        SpaceTimeGrid::new(
            vec![self.extent; self.dim],
            vec![self.nodes; self.dim],
            self.dt,
            vec![boundary; self.dim],
        )
        .map_err(|e| ConfigError(e.to_string()))
    }

    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            newton_tol: self.newton_tol,
            max_iter: self.max_newton,
            linear_solver: if self.linear_solver == "dense_lu" {
                LinearSolver::DenseLu
            } else {
                LinearSolver::ConjugateGradient { tol: self.cg_tol }
            },
        }
    }

    /// Two committed time levels ready for the stepper.
    pub fn initial_field(
        &self,
        grid: &SpaceTimeGrid,
        model: &MaterialModel,
    ) -> anyhow::Result<ConfigurationField> {
        let dim = self.dim;
        let a = self.amplitude;
        let m = self.mode as f64;
        let span = self.extent[1] - self.extent[0];
        let lo = self.extent[0];
        let displacement: Arc<dyn Fn(&[f64]) -> Vec<f64>> = match self.scenario {
            Scenario::Incompressible2d => Arc::new(|x: &[f64]| x.to_vec()),
            _ => {
                if self.periodic {
                    Arc::new(move |x: &[f64]| {
                        match dim {
                            1 => vec![x[0] + a * (m * TAU * (x[0] - lo) / span).sin()],
                            _ => (0..dim)
                                .map(|k| {
                                    let s: f64 = x.iter().sum();
                                    let phase = m * TAU * (s - dim as f64 * lo) / span;
                                    x[k] + if k % 2 == 0 {
                                        a * phase.sin()
                                    } else {
                                        a * phase.cos()
                                    }
                                })
                                .collect(),
                        }
                    })
                } else {
                    // Modes vanishing on the fixed boundary.
                    Arc::new(move |x: &[f64]| {
                        (0..dim)
                            .map(|k| {
                                let u: f64 = x
                                    .iter()
                                    .map(|&xi| (m * std::f64::consts::PI * (xi - lo) / span).sin())
                                    .product();
                                x[k] + a * u
                            })
                            .collect()
                    })
                }
            }
        };
        let mut field = ConfigurationField::new(dim).with_identity_wrap(grid);
        field.push_level(
            grid,
            ConfigurationField::level_from_fn(grid, dim, |x| displacement(x)),
        )?;
        let mut v0 = vec![0.0; grid.n_nodes() * dim];
        if self.scenario == Scenario::Incompressible2d {
            for node in 0..grid.n_nodes() {
                let x = grid.node_coords(&grid.node_multi(node));
                v0[node * 2] = a * x[0].sin() * x[1].cos();
                v0[node * 2 + 1] = -a * x[0].cos() * x[1].sin();
            }
        }
        let settings = self.settings();
        Ok(initialize_velocity(
            model,
            grid,
            &field,
            &v0,
            &settings,
            self.constrained,
        )?)
    }
}
