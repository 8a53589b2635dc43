//! Variational space-time integrator: a discrete Lagrangian summed over
//! rectangular space-time cells, discrete Euler-Lagrange equations solved
//! per time level by Newton iteration, and an optional discrete
//! incompressibility constraint enforced through per-cell multipliers.
//!
//! The position update has leapfrog structure: the unknown level enters
//! the discrete equations only through the kinetic term, whose node
//! quadrature makes the Jacobian block diagonal. Constrained steps couple
//! the new positions to cell multipliers and are solved through a Schur
//! complement on the multiplier block.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::fields::{
    cell_average, cell_corner_values, cell_gradient, cell_jet, ConfigurationField,
    SpaceTimeGrid, TimeLevel,
};
use crate::fields::REGULARITY_FLOOR;
use crate::material::MaterialModel;

/// Quadrature rule for the discrete Lagrangian on one space-time cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// Single evaluation at the space-time cell center.
    Midpoint,
    /// Kinetic energy at the node midpoints in time, potential energy
    /// averaged over the two time faces with the spatial jet at the cell
    /// center (the rule the stepper uses).
    #[default]
    TrapezoidMidpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DiscreteLagrangianConfig {
    pub quadrature: Quadrature,
}

/// Linear solver for the multiplier Schur complement in constrained steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    DenseLu,
    ConjugateGradient { tol: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub newton_tol: f64,
    pub max_iter: usize,
    pub linear_solver: LinearSolver,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            newton_tol: 1e-10,
            max_iter: 50,
            linear_solver: LinearSolver::ConjugateGradient { tol: 1e-12 },
        }
    }
}

/// Per-step solver report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub time: f64,
    pub newton_iters: usize,
    pub residual_max: f64,
    pub constraint_max: f64,
    pub energy: f64,
}

/// Committed trajectory with per-step diagnostics.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub field: ConfigurationField,
    pub steps: Vec<StepDiagnostics>,
}

/// Sign and spacing weight of corner `q` in the cell-gradient stencil
/// along axis `k`.
fn stencil_coeff(grid: &SpaceTimeGrid, q: usize, k: usize) -> f64 {
    let n = grid.n_space();
    let bit = (q >> (n - 1 - k)) & 1;
    let sign = if bit == 1 { 1.0 } else { -1.0 };
    sign / ((1usize << (n - 1)) as f64 * grid.spacing(k))
}

struct CellGeom {
    corners: Vec<usize>,
    rho: f64,
    sqrt_g: f64,
    big_g: DMatrix<f64>,
}

fn cell_geometry(model: &MaterialModel, grid: &SpaceTimeGrid, cell: usize) -> Result<CellGeom> {
    let multi = grid.cell_multi(cell);
    let x = grid.cell_center(&multi);
    Ok(CellGeom {
        corners: grid.cell_corners(&multi),
        rho: model.rho_at(&x),
        sqrt_g: model.base_metric.det_sqrt(&x)?,
        big_g: model.base_metric.eval(&x)?,
    })
}

/// Discrete Lagrangian of one cell over the slab (`slab`, `slab + 1`).
pub fn discrete_lagrangian(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    slab: usize,
    cell: usize,
    config: &DiscreteLagrangianConfig,
) -> Result<f64> {
    if slab + 1 >= field.levels.len() {
        return Err(Error::IndexError(format!(
            "slab {slab} needs levels {slab} and {} committed",
            slab + 1
        )));
    }
    let n = grid.n_space();
    let nc = field.n_comp;
    let corners = 1usize << n;
    let multi = grid.cell_multi(cell);
    let geom = cell_geometry(model, grid, cell)?;
    let vals_l = cell_corner_values(grid, field, slab, &multi);
    let vals_u = cell_corner_values(grid, field, slab + 1, &multi);
    let f_l = cell_gradient(grid, &vals_l, nc);
    let f_u = cell_gradient(grid, &vals_u, nc);
    let dt = grid.dt;
    let measure = grid.cell_volume() * dt;
    let scale = measure * geom.rho * geom.sqrt_g;

    match config.quadrature {
        Quadrature::Midpoint => {
            let y_l = cell_average(&vals_l, nc);
            let y_u = cell_average(&vals_u, nc);
            let y = (&y_l + &y_u) * 0.5;
            let v0 = (&y_u - &y_l) / dt;
            let f = (&f_l + &f_u) * 0.5;
            let g = model.fiber_metric.eval(y.as_slice())?;
            let kinetic = 0.5 * (v0.transpose() * &g * &v0)[(0, 0)];
            let w = model.energy.value(&geom.big_g, &g, &f)?;
            Ok(scale * (kinetic - w))
        }
        Quadrature::TrapezoidMidpoint => {
            let mut kinetic = 0.0;
            for q in 0..corners {
                let v = (&vals_u[q] - &vals_l[q]) / dt;
                let y_m = (&vals_u[q] + &vals_l[q]) * 0.5;
                let g = model.fiber_metric.eval(y_m.as_slice())?;
                kinetic += 0.5 * (v.transpose() * &g * &v)[(0, 0)] / corners as f64;
            }
            let mut potential = 0.0;
            for (vals, f) in [(&vals_l, &f_l), (&vals_u, &f_u)] {
                let y = cell_average(vals, nc);
                let g = model.fiber_metric.eval(y.as_slice())?;
                potential += 0.5 * model.energy.value(&geom.big_g, &g, f)?;
            }
            Ok(scale * (kinetic - potential))
        }
    }
}

/// Node gradients of the summed discrete Lagrangian of one slab with
/// respect to the lower and upper level values.
pub struct SlabGradients {
    pub lower: Vec<DVector<f64>>,
    pub upper: Vec<DVector<f64>>,
}

struct CellContribution {
    corners: Vec<usize>,
    lower: Vec<DVector<f64>>,
    upper: Vec<DVector<f64>>,
}

/// Gradients for the trapezoid-midpoint rule the stepper uses.
pub fn slab_gradients(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    slab: usize,
) -> Result<SlabGradients> {
    if slab + 1 >= field.levels.len() {
        return Err(Error::IndexError(format!(
            "slab {slab} needs levels {slab} and {} committed",
            slab + 1
        )));
    }
    let n = grid.n_space();
    let nc = field.n_comp;
    let corners = 1usize << n;
    let dt = grid.dt;
    let measure = grid.cell_volume() * dt;
    let flat_fiber = model.fiber_metric.is_flat();

    let per_cell: Result<Vec<CellContribution>> =
        exec::map_default(grid.n_cells(), |cell| -> Result<CellContribution> {
            let multi = grid.cell_multi(cell);
            let geom = cell_geometry(model, grid, cell)?;
            let vals_l = cell_corner_values(grid, field, slab, &multi);
            let vals_u = cell_corner_values(grid, field, slab + 1, &multi);
            let scale = measure * geom.rho * geom.sqrt_g;
            let mut lower = vec![DVector::zeros(nc); corners];
            let mut upper = vec![DVector::zeros(nc); corners];

            for q in 0..corners {
                let v = (&vals_u[q] - &vals_l[q]) / dt;
                let y_m = (&vals_u[q] + &vals_l[q]) * 0.5;
                let g = model.fiber_metric.eval(y_m.as_slice())?;
                let base = &g * &v / dt;
                let w = scale / corners as f64;
                if flat_fiber {
                    lower[q] -= w * &base;
                    upper[q] += w * &base;
                } else {
                    let dg = model.fiber_metric.deriv(y_m.as_slice())?;
                    let mut curve = DVector::zeros(nc);
                    for a in 0..nc {
                        curve[a] = 0.25 * (v.transpose() * &dg[a] * &v)[(0, 0)];
                    }
                    lower[q] += w * (&curve - &base);
                    upper[q] += w * (&curve + &base);
                }
            }

            for (vals, target) in [(&vals_l, &mut lower), (&vals_u, &mut upper)] {
                let f = cell_gradient(grid, vals, nc);
                let y = cell_average(vals, nc);
                let g = model.fiber_metric.eval(y.as_slice())?;
                let dwdv = model.energy.d_dv(&geom.big_g, &g, &f)?;
                for q in 0..corners {
                    for a in 0..nc {
                        let mut grad = 0.0;
                        for k in 0..n {
                            grad += dwdv[(a, k)] * stencil_coeff(grid, q, k);
                        }
                        target[q][a] -= 0.5 * scale * grad;
                    }
                }
                if !flat_fiber {
                    let dwdg = model.energy.d_dg(&geom.big_g, &g, &f)?;
                    let dg = model.fiber_metric.deriv(y.as_slice())?;
                    for a in 0..nc {
                        let term: f64 = dwdg.component_mul(&dg[a]).sum();
                        for q in 0..corners {
                            target[q][a] -= 0.5 * scale * term / corners as f64;
                        }
                    }
                }
            }

            Ok(CellContribution {
                corners: geom.corners,
                lower,
                upper,
            })
        })
        .into_iter()
        .collect();

    let mut out = SlabGradients {
        lower: vec![DVector::zeros(nc); grid.n_nodes()],
        upper: vec![DVector::zeros(nc); grid.n_nodes()],
    };
    for contrib in per_cell? {
        for (q, &node) in contrib.corners.iter().enumerate() {
            out.lower[node] += &contrib.lower[q];
            out.upper[node] += &contrib.upper[q];
        }
    }
    Ok(out)
}

/// Directional derivative of `slab_gradients` along a perturbation
/// (`dl`, `du`) of the two levels. Flat fiber metrics only: this backs the
/// linearized equations of the multisymplectic check.
pub fn slab_gradients_dir(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    slab: usize,
    dl: &[DVector<f64>],
    du: &[DVector<f64>],
) -> Result<SlabGradients> {
    if !model.fiber_metric.is_flat() {
        return Err(Error::DomainError {
            point: vec![],
            reason: "linearized slab gradients require a flat fiber metric".into(),
        });
    }
    let n = grid.n_space();
    let nc = field.n_comp;
    let corners = 1usize << n;
    let dt = grid.dt;
    let measure = grid.cell_volume() * dt;
    let g_flat = DMatrix::<f64>::identity(nc, nc);

    let per_cell: Result<Vec<CellContribution>> =
        exec::map_default(grid.n_cells(), |cell| -> Result<CellContribution> {
            let multi = grid.cell_multi(cell);
            let geom = cell_geometry(model, grid, cell)?;
            let vals_l = cell_corner_values(grid, field, slab, &multi);
            let vals_u = cell_corner_values(grid, field, slab + 1, &multi);
            let dvals_l: Vec<&DVector<f64>> =
                geom.corners.iter().map(|&node| &dl[node]).collect();
            let dvals_u: Vec<&DVector<f64>> =
                geom.corners.iter().map(|&node| &du[node]).collect();
            let scale = measure * geom.rho * geom.sqrt_g;
            let mut lower = vec![DVector::zeros(nc); corners];
            let mut upper = vec![DVector::zeros(nc); corners];

            for q in 0..corners {
                let dv = (dvals_u[q] - dvals_l[q]) / dt;
                let w = scale / corners as f64;
                lower[q] -= w / dt * &dv;
                upper[q] += w / dt * &dv;
            }

            for (vals, dvals, target) in [
                (&vals_l, &dvals_l, &mut lower),
                (&vals_u, &dvals_u, &mut upper),
            ] {
                let f = cell_gradient(grid, vals, nc);
                let mut df = DMatrix::zeros(nc, n);
                for q in 0..corners {
                    for k in 0..n {
                        let c = stencil_coeff(grid, q, k);
                        for a in 0..nc {
                            df[(a, k)] += c * dvals[q][a];
                        }
                    }
                }
                let ddwdv = model.energy.d2_dv_dir(&geom.big_g, &g_flat, &f, &df)?;
                for q in 0..corners {
                    for a in 0..nc {
                        let mut grad = 0.0;
                        for k in 0..n {
                            grad += ddwdv[(a, k)] * stencil_coeff(grid, q, k);
                        }
                        target[q][a] -= 0.5 * scale * grad;
                    }
                }
            }

            Ok(CellContribution {
                corners: geom.corners,
                lower,
                upper,
            })
        })
        .into_iter()
        .collect();

    let mut out = SlabGradients {
        lower: vec![DVector::zeros(nc); grid.n_nodes()],
        upper: vec![DVector::zeros(nc); grid.n_nodes()],
    };
    for contrib in per_cell? {
        for (q, &node) in contrib.corners.iter().enumerate() {
            out.lower[node] += &contrib.lower[q];
            out.upper[node] += &contrib.upper[q];
        }
    }
    Ok(out)
}

/// Diagonal kinetic blocks d_N g(y_m) of the slab, the negated Jacobian of
/// the discrete equations with respect to the upper level.
fn mass_blocks(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    slab: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let n = grid.n_space();
    let nc = field.n_comp;
    let corners = 1usize << n;
    let dt = grid.dt;
    let measure = grid.cell_volume() * dt;
    let mut weight = vec![0.0; grid.n_nodes()];
    for cell in 0..grid.n_cells() {
        let geom = cell_geometry(model, grid, cell)?;
        for &node in &geom.corners {
            weight[node] += measure * geom.rho * geom.sqrt_g / (corners as f64 * dt * dt);
        }
    }
    let flat = model.fiber_metric.is_flat();
    let mut out = Vec::with_capacity(grid.n_nodes());
    for node in 0..grid.n_nodes() {
        let g = if flat {
            DMatrix::identity(nc, nc)
        } else {
            let y_l = field.phi_at(grid, slab, node);
            let y_u = field.phi_at(grid, slab + 1, node);
            let y_m = (y_l + y_u) * 0.5;
            model.fiber_metric.eval(y_m.as_slice())?
        };
        out.push(weight[node] * g);
    }
    Ok(out)
}

/// Per-cell gradients of the induced constraint J_d - 1 with respect to the
/// corner values of one level.
struct ConstraintGradient {
    corners: Vec<Vec<usize>>,
    coeffs: Vec<DMatrix<f64>>,
}

fn build_constraint_gradient(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> Result<ConstraintGradient> {
    let n = grid.n_space();
    let nc = field.n_comp;
    let corners = 1usize << n;
    let flat_fiber = model.fiber_metric.is_flat();
    let mut out = ConstraintGradient {
        corners: Vec::with_capacity(grid.n_cells()),
        coeffs: Vec::with_capacity(grid.n_cells()),
    };
    for cell in 0..grid.n_cells() {
        let multi = grid.cell_multi(cell);
        let geom = cell_geometry(model, grid, cell)?;
        let vals = cell_corner_values(grid, field, level, &multi);
        let f = cell_gradient(grid, &vals, nc);
        let y = cell_average(&vals, nc);
        let g = model.fiber_metric.eval(y.as_slice())?;
        let det_f = f.determinant();
        if det_f <= REGULARITY_FLOOR {
            return Err(Error::NonRegular {
                det: det_f,
                floor: REGULARITY_FLOOR,
            });
        }
        let j = det_f * (g.determinant() / geom.big_g.determinant()).sqrt();
        let f_inv = f.clone().try_inverse().ok_or(Error::NonRegular {
            det: det_f,
            floor: REGULARITY_FLOOR,
        })?;
        let mut coeff = DMatrix::zeros(nc, corners);
        for q in 0..corners {
            for a in 0..nc {
                let mut c = 0.0;
                for k in 0..n {
                    c += j * f_inv[(k, a)] * stencil_coeff(grid, q, k);
                }
                coeff[(a, q)] = c;
            }
        }
        if !flat_fiber {
            let g_inv = model.fiber_metric.inverse(y.as_slice())?;
            let dg = model.fiber_metric.deriv(y.as_slice())?;
            for a in 0..nc {
                let term = 0.5 * j * (&g_inv * &dg[a]).trace() / corners as f64;
                for q in 0..corners {
                    coeff[(a, q)] += term;
                }
            }
        }
        // Fixed nodes are not unknowns; zero their columns.
        for (q, &node) in geom.corners.iter().enumerate() {
            if grid.is_fixed_node(&grid.node_multi(node)) {
                for a in 0..nc {
                    coeff[(a, q)] = 0.0;
                }
            }
        }
        out.corners.push(geom.corners);
        out.coeffs.push(coeff);
    }
    Ok(out)
}

impl ConstraintGradient {
    fn apply(&self, v: &[DVector<f64>]) -> DVector<f64> {
        let mut out = DVector::zeros(self.corners.len());
        for (c, (corners, coeff)) in self.corners.iter().zip(&self.coeffs).enumerate() {
            for (q, &node) in corners.iter().enumerate() {
                for a in 0..coeff.nrows() {
                    out[c] += coeff[(a, q)] * v[node][a];
                }
            }
        }
        out
    }

    fn apply_transpose(&self, mu: &DVector<f64>, n_nodes: usize, nc: usize) -> Vec<DVector<f64>> {
        let mut out = vec![DVector::zeros(nc); n_nodes];
        for (c, (corners, coeff)) in self.corners.iter().zip(&self.coeffs).enumerate() {
            for (q, &node) in corners.iter().enumerate() {
                for a in 0..nc {
                    out[node][a] += coeff[(a, q)] * mu[c];
                }
            }
        }
        out
    }

    fn schur_diag(&self, mass_inv: &[DMatrix<f64>]) -> DVector<f64> {
        let nc = self.coeffs.first().map_or(0, |c| c.nrows());
        let mut out = DVector::zeros(self.corners.len());
        for (c, (corners, coeff)) in self.corners.iter().zip(&self.coeffs).enumerate() {
            for (q, &node) in corners.iter().enumerate() {
                let col = coeff.column(q);
                let mut v = DVector::zeros(nc);
                for a in 0..nc {
                    v[a] = col[a];
                }
                out[c] += (v.transpose() * &mass_inv[node] * &v)[(0, 0)];
            }
        }
        out
    }
}

/// Multiplier forces: gradient with respect to the level's positions of
/// sum_c vol dt lambda_c (J_d - 1).
fn constraint_force(
    grad: &ConstraintGradient,
    lambda: &[f64],
    measure: f64,
    n_nodes: usize,
    nc: usize,
) -> Vec<DVector<f64>> {
    let mu = DVector::from_fn(lambda.len(), |c, _| measure * lambda[c]);
    grad.apply_transpose(&mu, n_nodes, nc)
}

/// Discrete Euler-Lagrange residual at one committed level: the gradient
/// of the action sum with respect to that level's positions, including
/// multiplier forces when the level carries them. None at fixed nodes.
pub fn discrete_el_residual(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> Result<Vec<Option<DVector<f64>>>> {
    if level == 0 || level + 1 >= field.levels.len() {
        return Err(Error::IndexError(
            "discrete residual needs neighbor levels".into(),
        ));
    }
    let prev = slab_gradients(model, grid, field, level - 1)?;
    let cur = slab_gradients(model, grid, field, level)?;
    let nc = field.n_comp;
    let force = match &field.levels[level].lambda {
        Some(lam) => {
            let grad = build_constraint_gradient(model, grid, field, level)?;
            Some(constraint_force(
                &grad,
                lam,
                grid.cell_volume() * grid.dt,
                grid.n_nodes(),
                nc,
            ))
        }
        None => None,
    };
    let mut out = Vec::with_capacity(grid.n_nodes());
    for node in 0..grid.n_nodes() {
        if grid.is_fixed_node(&grid.node_multi(node)) {
            out.push(None);
            continue;
        }
        let mut r = &prev.upper[node] + &cur.lower[node];
        if let Some(force) = &force {
            r += &force[node];
        }
        out.push(Some(r));
    }
    Ok(out)
}

fn pcg<F: Fn(&DVector<f64>) -> DVector<f64>>(
    apply: F,
    diag: &DVector<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> DVector<f64> {
    let n = b.len();
    let mut x = DVector::zeros(n);
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return x;
    }
    let inv_d = diag.map(|d| if d.abs() > 1e-300 { 1.0 / d } else { 1.0 });
    let mut r = b.clone();
    let mut z = r.component_mul(&inv_d);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    let mut best = (x.clone(), r.norm());
    for _ in 0..max_iter {
        if r.norm() <= tol * b_norm {
            break;
        }
        let ap = apply(&p);
        let pap = p.dot(&ap);
        if pap.abs() < 1e-300 {
            break;
        }
        let alpha = rz / pap;
        x += alpha * &p;
        r -= alpha * ap;
        let rn = r.norm();
        if rn < best.1 {
            best = (x.clone(), rn);
        }
        z = r.component_mul(&inv_d);
        let rz_new = r.dot(&z);
        if rz.abs() < 1e-300 {
            break;
        }
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + beta * &p;
    }
    if r.norm() <= best.1 {
        x
    } else {
        best.0
    }
}

/// Multiplier modes along which the collocated constraint Jacobian is
/// (nearly) singular on periodic grids: the centered-difference adjoint
/// annihilates every per-axis sign pattern over the cells, so those modes
/// exert no force and must be excluded from the multiplier solve.
fn near_kernel_modes(
    grad: &ConstraintGradient,
    grid: &SpaceTimeGrid,
    n_nodes: usize,
    nc: usize,
) -> Vec<DVector<f64>> {
    let n = grid.n_space();
    let m = grid.n_cells();
    let mut scale = 0.0f64;
    for coeffs in &grad.coeffs {
        scale += coeffs.norm_squared();
    }
    let scale = scale.sqrt().max(1e-300);
    let mut modes = Vec::new();
    for s in 0..(1usize << n) {
        let mut chi = DVector::zeros(m);
        for cell in 0..m {
            let multi = grid.cell_multi(cell);
            let mut flips = 0usize;
            for k in 0..n {
                if (s >> k) & 1 == 1 {
                    flips += multi[k];
                }
            }
            chi[cell] = if flips % 2 == 0 { 1.0 } else { -1.0 };
        }
        chi /= chi.norm();
        let image = grad.apply_transpose(&chi, n_nodes, nc);
        let image_norm: f64 = image.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        if image_norm < 1e-8 * scale {
            modes.push(chi);
        }
    }
    modes
}

fn deflate(v: &mut DVector<f64>, modes: &[DVector<f64>]) {
    for chi in modes {
        let c = chi.dot(v);
        v.axpy(-c, chi, 1.0);
    }
}

fn solve_schur(
    grad: &ConstraintGradient,
    mass_inv: &[DMatrix<f64>],
    rhs: &DVector<f64>,
    settings: &SolverSettings,
    grid: &SpaceTimeGrid,
    n_nodes: usize,
    nc: usize,
) -> Result<DVector<f64>> {
    let apply = |mu: &DVector<f64>| -> DVector<f64> {
        let spread = grad.apply_transpose(mu, n_nodes, nc);
        let mut scaled = Vec::with_capacity(n_nodes);
        for node in 0..n_nodes {
            scaled.push(&mass_inv[node] * &spread[node]);
        }
        grad.apply(&scaled)
    };
    match settings.linear_solver {
        LinearSolver::ConjugateGradient { tol } => {
            let diag = grad.schur_diag(mass_inv);
            let modes = near_kernel_modes(grad, grid, n_nodes, nc);
            let mut b = rhs.clone();
            deflate(&mut b, &modes);
            let apply_defl = |mu: &DVector<f64>| {
                let mut out = apply(mu);
                deflate(&mut out, &modes);
                out
            };
            let mut mu = pcg(apply_defl, &diag, &b, tol, 8 * b.len().max(32));
            deflate(&mut mu, &modes);
            Ok(mu)
        }
        LinearSolver::DenseLu => {
            let m = rhs.len();
            let mut s = DMatrix::zeros(m, m);
            for c in 0..m {
                let mut e = DVector::zeros(m);
                e[c] = 1.0;
                s.set_column(c, &apply(&e));
            }
            let lu = s.full_piv_lu();
            lu.solve(rhs).ok_or_else(|| {
                Error::SingularSaddle(
                    "dense LU of the multiplier Schur complement failed; \
                     the constraint Jacobian is rank deficient (use the \
                     conjugate gradient solver for periodic domains)"
                        .into(),
                )
            })
        }
    }
}

struct StepOutcome {
    field: ConfigurationField,
    newton_iters: usize,
    residual_max: f64,
    constraint_max: f64,
}

fn step_impl(
    model: &MaterialModel,
    field: &ConfigurationField,
    grid: &SpaceTimeGrid,
    settings: &SolverSettings,
    constrained: bool,
) -> Result<StepOutcome> {
    if field.levels.len() < 2 {
        return Err(Error::IndexError(
            "stepping needs two committed time levels".into(),
        ));
    }
    let k = field.levels.len() - 1;
    let nc = field.n_comp;
    let n_nodes = grid.n_nodes();
    let measure = grid.cell_volume() * grid.dt;

    let mut trial = field.clone();
    trial.push_level(
        grid,
        TimeLevel {
            phi: field.levels[k].phi.clone(),
            lambda: None,
        },
    )?;
    let mut lambda: Vec<f64> = if constrained {
        match &field.levels[k].lambda {
            Some(l) => l.clone(),
            None => match k.checked_sub(1).and_then(|p| field.levels[p].lambda.clone()) {
                Some(l) => l,
                None => vec![0.0; grid.n_cells()],
            },
        }
    } else {
        Vec::new()
    };

    let interior: Vec<bool> = (0..n_nodes)
        .map(|node| !grid.is_fixed_node(&grid.node_multi(node)))
        .collect();
    let prev_upper = slab_gradients(model, grid, &trial, k - 1)?.upper;
    let cons_grad_k = if constrained {
        Some(build_constraint_gradient(model, grid, &trial, k)?)
    } else {
        None
    };

    let mut newton_iters = 0;
    let mut residual_max;
    let mut constraint_max;
    loop {
        let cur_lower = slab_gradients(model, grid, &trial, k)?.lower;
        let force = cons_grad_k
            .as_ref()
            .map(|g| constraint_force(g, &lambda, measure, n_nodes, nc));
        let mut residual = vec![DVector::zeros(nc); n_nodes];
        residual_max = 0.0f64;
        for node in 0..n_nodes {
            if !interior[node] {
                continue;
            }
            let mut r = &prev_upper[node] + &cur_lower[node];
            if let Some(force) = &force {
                r += &force[node];
            }
            // Scale to a measure-free residual so the tolerance does not
            // depend on the grid resolution.
            r /= measure;
            residual_max = residual_max.max(r.amax());
            residual[node] = r;
        }
        let constraint = if constrained {
            crate::dynamics::induced_constraint(model, grid, &trial, k + 1)?
        } else {
            Vec::new()
        };
        constraint_max = constraint.iter().fold(0.0f64, |m, c| m.max(c.abs()));

        if std::env::var("CONTINUUM_NEWTON_TRACE").is_ok() {
            eprintln!("iter {newton_iters}: residual {residual_max:.3e} constraint {constraint_max:.3e}");
        }
        if residual_max.max(constraint_max) <= settings.newton_tol {
            break;
        }
        if newton_iters >= settings.max_iter {
            return Err(Error::NewtonDiverged {
                residual: residual_max.max(constraint_max),
                iters: newton_iters,
                tol: settings.newton_tol,
            });
        }
        newton_iters += 1;

        let masses = mass_blocks(model, grid, &trial, k)?;
        let mut mass_inv = Vec::with_capacity(n_nodes);
        for node in 0..n_nodes {
            let m = &masses[node] / measure;
            mass_inv.push(m.try_inverse().ok_or(Error::NonRegular {
                det: 0.0,
                floor: 0.0,
            })?);
        }

        let mut delta = vec![DVector::zeros(nc); n_nodes];
        if constrained {
            let grad_k = cons_grad_k.as_ref().expect("constrained gradient");
            let cons_grad_next = build_constraint_gradient(model, grid, &trial, k + 1)?;
            let mut minv_r = Vec::with_capacity(n_nodes);
            for node in 0..n_nodes {
                minv_r.push(&mass_inv[node] * &residual[node]);
            }
            let mut rhs = -cons_grad_next.apply(&minv_r);
            rhs -= DVector::from_vec(constraint.clone());
            // The Schur operator and the multiplier spread must use the
            // same gradient as the force in the residual (level `k`), so
            // the position update cancels the residual exactly; the
            // level `k + 1` gradient only enters the right hand side,
            // where it drives the constraint toward zero.
            let dlam = solve_schur(grad_k, &mass_inv, &rhs, settings, grid, n_nodes, nc)?;
            let spread = grad_k.apply_transpose(&dlam, n_nodes, nc);
            for node in 0..n_nodes {
                if interior[node] {
                    delta[node] = &mass_inv[node] * (&residual[node] + &spread[node]);
                }
            }
            for c in 0..lambda.len() {
                lambda[c] += dlam[c];
            }
        } else {
            for node in 0..n_nodes {
                if interior[node] {
                    delta[node] = &mass_inv[node] * &residual[node];
                }
            }
        }
        for node in 0..n_nodes {
            if interior[node] {
                for a in 0..nc {
                    trial.levels[k + 1].phi[node * nc + a] += delta[node][a];
                }
            }
        }
    }

    if constrained {
        trial.levels[k].lambda = Some(lambda);
    }
    Ok(StepOutcome {
        field: trial,
        newton_iters,
        residual_max,
        constraint_max,
    })
}

/// Advances the field by one time level, solving the discrete
/// Euler-Lagrange system for the interior nodes (and the cell multipliers
/// when `constrained`). The committed multiplier is attached to the
/// current last level; fixed-boundary nodes keep their positions.
pub fn step(
    model: &MaterialModel,
    field: &ConfigurationField,
    grid: &SpaceTimeGrid,
    settings: &SolverSettings,
    constrained: bool,
) -> Result<ConfigurationField> {
    Ok(step_impl(model, field, grid, settings, constrained)?.field)
}

/// Seeds the second level from nodal velocities: phi_1 = phi_0 + dt V_0,
/// followed by a constrained projection back onto J_d = 1 when requested.
/// `field` must hold exactly one committed level.
pub fn initialize_velocity(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    v0: &[f64],
    settings: &SolverSettings,
    constrained: bool,
) -> Result<ConfigurationField> {
    if field.levels.len() != 1 {
        return Err(Error::IndexError(
            "velocity initialization expects exactly one committed level".into(),
        ));
    }
    let nc = field.n_comp;
    let n_nodes = grid.n_nodes();
    if v0.len() != n_nodes * nc {
        return Err(Error::ShapeError(format!(
            "velocity field has {} entries, expected {}",
            v0.len(),
            n_nodes * nc
        )));
    }
    let mut out = field.clone();
    let mut phi1 = field.levels[0].phi.clone();
    for node in 0..n_nodes {
        if grid.is_fixed_node(&grid.node_multi(node)) {
            continue;
        }
        for a in 0..nc {
            phi1[node * nc + a] += grid.dt * v0[node * nc + a];
        }
    }
    out.push_level(grid, TimeLevel { phi: phi1, lambda: None })?;
    if !constrained {
        return Ok(out);
    }

    let tol = 10.0 * settings.newton_tol;
    for iter in 0..=settings.max_iter {
        let constraint = crate::dynamics::induced_constraint(model, grid, &out, 1)?;
        let worst = constraint.iter().fold(0.0f64, |m, c| m.max(c.abs()));
        if worst <= tol {
            return Ok(out);
        }
        if iter == settings.max_iter {
            return Err(Error::NewtonDiverged {
                residual: worst,
                iters: iter,
                tol,
            });
        }
        let grad = build_constraint_gradient(model, grid, &out, 1)?;
        let masses = mass_blocks(model, grid, &out, 0)?;
        let mut mass_inv = Vec::with_capacity(n_nodes);
        for m in masses {
            mass_inv.push(m.try_inverse().ok_or(Error::NonRegular {
                det: 0.0,
                floor: 0.0,
            })?);
        }
        let rhs = DVector::from_vec(constraint);
        let mu = solve_schur(&grad, &mass_inv, &rhs, settings, grid, n_nodes, nc)?;
        let spread = grad.apply_transpose(&mu, n_nodes, nc);
        for node in 0..n_nodes {
            if grid.is_fixed_node(&grid.node_multi(node)) {
                continue;
            }
            let d = &mass_inv[node] * &spread[node];
            for a in 0..nc {
                out.levels[1].phi[node * nc + a] -= d[a];
            }
        }
    }
    Ok(out)
}

/// Total discrete energy of one slab: node-quadrature kinetic energy plus
/// the time average of the two face potentials.
pub fn discrete_energy(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    slab: usize,
) -> Result<f64> {
    let n = grid.n_space();
    let nc = field.n_comp;
    let corners = 1usize << n;
    let dt = grid.dt;
    let vol = grid.cell_volume();
    let mut total = 0.0;
    for cell in 0..grid.n_cells() {
        let multi = grid.cell_multi(cell);
        let geom = cell_geometry(model, grid, cell)?;
        let vals_l = cell_corner_values(grid, field, slab, &multi);
        let vals_u = cell_corner_values(grid, field, slab + 1, &multi);
        let scale = vol * geom.rho * geom.sqrt_g;
        for q in 0..corners {
            let v = (&vals_u[q] - &vals_l[q]) / dt;
            let y_m = (&vals_u[q] + &vals_l[q]) * 0.5;
            let g = model.fiber_metric.eval(y_m.as_slice())?;
            total += scale * 0.5 * (v.transpose() * &g * &v)[(0, 0)] / corners as f64;
        }
        for vals in [&vals_l, &vals_u] {
            let f = cell_gradient(grid, vals, nc);
            let y = cell_average(vals, nc);
            let g = model.fiber_metric.eval(y.as_slice())?;
            total += scale * 0.5 * model.energy.value(&geom.big_g, &g, &f)?;
        }
    }
    Ok(total)
}

/// Summed discrete momentum conjugate to a constant fiber shift c: the
/// node sum of the slab's upper-level gradients contracted with c. An
/// exact invariant of the scheme on periodic grids with a flat fiber
/// metric.
pub fn discrete_fiber_momentum(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    slab: usize,
    c: &DVector<f64>,
) -> Result<f64> {
    let grads = slab_gradients(model, grid, field, slab)?;
    let mut total = 0.0;
    for node in 0..grid.n_nodes() {
        total += grads.upper[node].dot(c);
    }
    Ok(total)
}

/// Runs `n_steps` of the integrator from two committed levels, collecting
/// per-step diagnostics. In constrained runs the multipliers of the first
/// and last levels are filled from their neighbors so every committed
/// level carries one.
pub fn run(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    initial: &ConfigurationField,
    settings: &SolverSettings,
    n_steps: usize,
    constrained: bool,
) -> Result<Trajectory> {
    if initial.levels.len() != 2 {
        return Err(Error::IndexError(
            "run expects exactly two committed time levels".into(),
        ));
    }
    let mut field = initial.clone();
    let mut steps = Vec::with_capacity(n_steps);
    for s in 0..n_steps {
        let outcome = step_impl(model, &field, grid, settings, constrained)?;
        field = outcome.field;
        let k = field.levels.len() - 2;
        if constrained && field.levels[0].lambda.is_none() && k >= 1 {
            field.levels[0].lambda = field.levels[1].lambda.clone();
        }
        let energy = discrete_energy(model, grid, &field, k)?;
        steps.push(StepDiagnostics {
            step: s + 1,
            time: (k + 1) as f64 * grid.dt,
            newton_iters: outcome.newton_iters,
            residual_max: outcome.residual_max,
            constraint_max: outcome.constraint_max,
            energy,
        });
    }
    if constrained {
        let last = field.levels.len() - 1;
        if field.levels[last].lambda.is_none() && last >= 1 {
            field.levels[last].lambda = field.levels[last - 1].lambda.clone();
        }
    }
    Ok(Trajectory { field, steps })
}

/// Semidiscrete acceleration for the reference integrator: the exact
/// gradient of the cell-quadrature potential mapped through the lumped
/// kinetic metric, so the reference scheme integrates a well-defined
/// Hamiltonian on the same spatial discretization.
fn semidiscrete_accel(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    template: &ConfigurationField,
    phi: &[f64],
) -> Result<Vec<f64>> {
    let nc = template.n_comp;
    let n = grid.n_space();
    let corners = 1usize << n;
    let vol = grid.cell_volume();
    let flat_fiber = model.fiber_metric.is_flat();
    let mut scratch = ConfigurationField::new(nc);
    scratch.wrap_shift = template.wrap_shift.clone();
    scratch.push_level(
        grid,
        TimeLevel {
            phi: phi.to_vec(),
            lambda: None,
        },
    )?;
    let mut force = vec![DVector::zeros(nc); grid.n_nodes()];
    let mut node_weight = vec![0.0; grid.n_nodes()];
    for cell in 0..grid.n_cells() {
        let multi = grid.cell_multi(cell);
        let geom = cell_geometry(model, grid, cell)?;
        let vals = cell_corner_values(grid, &scratch, 0, &multi);
        let f = cell_gradient(grid, &vals, nc);
        let y = cell_average(&vals, nc);
        let g = model.fiber_metric.eval(y.as_slice())?;
        let scale = vol * geom.rho * geom.sqrt_g;
        let dwdv = model.energy.d_dv(&geom.big_g, &g, &f)?;
        for (q, &node) in geom.corners.iter().enumerate() {
            node_weight[node] += scale / corners as f64;
            for a in 0..nc {
                let mut grad = 0.0;
                for k in 0..n {
                    grad += dwdv[(a, k)] * stencil_coeff(grid, q, k);
                }
                force[node][a] -= scale * grad;
            }
        }
        if !flat_fiber {
            let dwdg = model.energy.d_dg(&geom.big_g, &g, &f)?;
            let dg = model.fiber_metric.deriv(y.as_slice())?;
            for a in 0..nc {
                let term: f64 = dwdg.component_mul(&dg[a]).sum();
                for &node in &geom.corners {
                    force[node][a] -= scale * term / corners as f64;
                }
            }
        }
    }
    let mut accel = vec![0.0; phi.len()];
    for node in 0..grid.n_nodes() {
        if grid.is_fixed_node(&grid.node_multi(node)) {
            continue;
        }
        let a = if flat_fiber {
            &force[node] / node_weight[node]
        } else {
            let y = scratch.phi_at(grid, 0, node);
            let g_inv = model.fiber_metric.inverse(y.as_slice())?;
            g_inv * &force[node] / node_weight[node]
        };
        for comp in 0..nc {
            accel[node * nc + comp] = a[comp];
        }
    }
    Ok(accel)
}

/// Kinetic plus stored energy of a semidiscrete state (node velocities,
/// cell-centered potentials).
fn semidiscrete_energy(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    template: &ConfigurationField,
    phi: &[f64],
    v: &[f64],
) -> Result<f64> {
    let nc = template.n_comp;
    let n = grid.n_space();
    let corners = 1usize << n;
    let vol = grid.cell_volume();
    let mut scratch = ConfigurationField::new(nc);
    scratch.wrap_shift = template.wrap_shift.clone();
    scratch.push_level(
        grid,
        TimeLevel {
            phi: phi.to_vec(),
            lambda: None,
        },
    )?;
    let mut node_weight = vec![0.0; grid.n_nodes()];
    let mut total = 0.0;
    for cell in 0..grid.n_cells() {
        let geom = cell_geometry(model, grid, cell)?;
        for &node in &geom.corners {
            node_weight[node] += vol * geom.rho * geom.sqrt_g / corners as f64;
        }
        let jet = cell_jet(grid, &scratch, 0, cell)?;
        total += vol * geom.rho * geom.sqrt_g * model.stored_energy(&jet)?;
    }
    for node in 0..grid.n_nodes() {
        let y = scratch.phi_at(grid, 0, node);
        let g = model.fiber_metric.eval(y.as_slice())?;
        let vn = DVector::from_fn(nc, |a, _| v[node * nc + a]);
        total += node_weight[node] * 0.5 * (vn.transpose() * &g * &vn)[(0, 0)];
    }
    Ok(total)
}

/// Classical fourth-order Runge-Kutta reference integrator for the
/// semidiscrete equations, used to contrast energy behavior with the
/// variational scheme. Returns the trajectory and the per-level energies.
pub fn rk4_trajectory(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    initial: &ConfigurationField,
    v0: &[f64],
    n_steps: usize,
) -> Result<(ConfigurationField, Vec<f64>)> {
    if initial.levels.len() != 1 {
        return Err(Error::IndexError(
            "reference integrator expects exactly one committed level".into(),
        ));
    }
    let dt = grid.dt;
    let mut phi = initial.levels[0].phi.clone();
    let mut v = v0.to_vec();
    let mut out = initial.clone();
    let mut energies =
        vec![semidiscrete_energy(model, grid, initial, &phi, &v)?];
    let axpy = |y: &[f64], s: f64, x: &[f64]| -> Vec<f64> {
        y.iter().zip(x).map(|(a, b)| a + s * b).collect()
    };
    for _ in 0..n_steps {
        let a1 = semidiscrete_accel(model, grid, initial, &phi)?;
        let p2 = axpy(&phi, 0.5 * dt, &v);
        let v2 = axpy(&v, 0.5 * dt, &a1);
        let a2 = semidiscrete_accel(model, grid, initial, &p2)?;
        let p3 = axpy(&phi, 0.5 * dt, &v2);
        let v3 = axpy(&v, 0.5 * dt, &a2);
        let a3 = semidiscrete_accel(model, grid, initial, &p3)?;
        let p4 = axpy(&phi, dt, &v3);
        let v4 = axpy(&v, dt, &a3);
        let a4 = semidiscrete_accel(model, grid, initial, &p4)?;
        for i in 0..phi.len() {
            phi[i] += dt / 6.0 * (v[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i]);
            v[i] += dt / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]);
        }
        out.push_level(
            grid,
            TimeLevel {
                phi: phi.clone(),
                lambda: None,
            },
        )?;
        energies.push(semidiscrete_energy(model, grid, initial, &phi, &v)?);
    }
    Ok((out, energies))
}

/// Discrete multisymplectic form formula defect on a committed trajectory:
/// two independent solutions of the linearized discrete Euler-Lagrange
/// equations are propagated through the patch, and the signed sum of the
/// boundary two-form pairing is returned relative to its term magnitude.
/// Requires a flat fiber metric and at least four committed levels.
pub fn multisymplectic_defect(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    seed: u64,
) -> Result<f64> {
    let levels = field.levels.len();
    if levels < 4 {
        return Err(Error::IndexError(
            "multisymplectic check needs at least four committed levels".into(),
        ));
    }
    let nc = field.n_comp;
    let n_nodes = grid.n_nodes();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let random_level = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<DVector<f64>> {
        (0..n_nodes)
            .map(|node| {
                if grid.is_fixed_node(&grid.node_multi(node)) {
                    DVector::zeros(nc)
                } else {
                    DVector::from_fn(nc, |_, _| rng.gen_range(-1.0..1.0))
                }
            })
            .collect()
    };

    let propagate = |init0: Vec<DVector<f64>>,
                         init1: Vec<DVector<f64>>|
     -> Result<Vec<Vec<DVector<f64>>>> {
        let mut sol = vec![init0, init1];
        let zero = vec![DVector::zeros(nc); n_nodes];
        for k in 1..levels - 1 {
            let masses = mass_blocks(model, grid, field, k)?;
            let from_prev =
                slab_gradients_dir(model, grid, field, k - 1, &sol[k - 1], &sol[k])?;
            let from_cur = slab_gradients_dir(model, grid, field, k, &sol[k], &zero)?;
            let mut next = vec![DVector::zeros(nc); n_nodes];
            for node in 0..n_nodes {
                if grid.is_fixed_node(&grid.node_multi(node)) {
                    continue;
                }
                let known = &from_prev.upper[node] + &from_cur.lower[node];
                let m_inv = masses[node].clone().try_inverse().ok_or(Error::NonRegular {
                    det: 0.0,
                    floor: 0.0,
                })?;
                next[node] = m_inv * known;
            }
            sol.push(next);
        }
        Ok(sol)
    };

    let v = propagate(random_level(&mut rng), random_level(&mut rng))?;
    let w = propagate(random_level(&mut rng), random_level(&mut rng))?;

    // Boundary one-form derivatives: at the first level the action only
    // sees the lowest slab, at the last level only the highest.
    let last = levels - 1;
    let db0_w = slab_gradients_dir(model, grid, field, 0, &w[0], &w[1])?.lower;
    let db0_v = slab_gradients_dir(model, grid, field, 0, &v[0], &v[1])?.lower;
    let dbt_w =
        slab_gradients_dir(model, grid, field, last - 1, &w[last - 1], &w[last])?.upper;
    let dbt_v =
        slab_gradients_dir(model, grid, field, last - 1, &v[last - 1], &v[last])?.upper;

    let mut defect = 0.0;
    let mut scale = 0.0;
    for node in 0..n_nodes {
        let t1 = db0_w[node].dot(&v[0][node]);
        let t2 = db0_v[node].dot(&w[0][node]);
        let t3 = dbt_w[node].dot(&v[last][node]);
        let t4 = dbt_v[node].dot(&w[last][node]);
        defect += (t1 - t2) + (t3 - t4);
        scale += t1.abs() + t2.abs() + t3.abs() + t4.abs();
    }
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(defect.abs() / scale)
}
