//! Euler-Lagrange residual evaluation: the general coordinate form (used as
//! a cross-validation oracle), the continuum form assembled from stress
//! objects, the barotropic and elastic specializations, and the constrained
//! (incompressible) system with its pressure diagnostics.
//!
//! All residuals share one orientation and one scaling: the returned value
//! is [d_mu(dL/dv^a_mu) - dL/dy^a] / sqrt(det G), so that the leading term
//! reads rho g_ab (covariant acceleration)^b in every formulation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec;
use crate::fields::{cell_jet, jet_extend, ConfigurationField, JetSample, SpaceTimeGrid};
use crate::material::{MaterialModel, StoredEnergy};

/// Pointwise defect of the field equations over the grid; `values[node]` is
/// None on excluded (boundary) nodes.
#[derive(Debug, Clone)]
pub struct ELResidual {
    pub values: Vec<Option<DVector<f64>>>,
    pub worst: f64,
}

impl ELResidual {
    pub fn from_values(values: Vec<Option<DVector<f64>>>) -> Self {
        let worst = values
            .iter()
            .flatten()
            .map(|v| v.amax())
            .fold(0.0f64, f64::max);
        Self { values, worst }
    }

    /// Max-norm difference with another residual over shared nodes.
    pub fn max_difference(&self, other: &ELResidual) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .filter_map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some((a - b).amax()),
                _ => None,
            })
            .fold(0.0f64, f64::max)
    }
}

/// Configuration with the multiplier populated at every level of interest.
#[derive(Debug, Clone)]
pub struct ConstrainedState {
    pub field: ConfigurationField,
}

impl ConstrainedState {
    pub fn new(field: ConfigurationField) -> Result<Self> {
        if field.levels.iter().any(|l| l.lambda.is_none()) {
            return Err(Error::MissingMultiplier);
        }
        Ok(Self { field })
    }

    /// Cell pressures P = lambda / sqrt(det G) at one level.
    pub fn pressure(
        &self,
        grid: &SpaceTimeGrid,
        model: &MaterialModel,
        level: usize,
    ) -> Result<Vec<f64>> {
        let lam = self.field.levels[level]
            .lambda
            .as_ref()
            .ok_or(Error::MissingMultiplier)?;
        let mut out = Vec::with_capacity(lam.len());
        for (c, l) in lam.iter().enumerate() {
            let x = grid.cell_center(&grid.cell_multi(c));
            out.push(l / model.base_metric.det_sqrt(&x)?);
        }
        Ok(out)
    }
}

fn check_level(field: &ConfigurationField, level: usize) -> Result<()> {
    if level == 0 || level + 1 >= field.levels.len() {
        return Err(Error::IndexError(format!(
            "residual needs levels {level} +/- 1, field has {}",
            field.levels.len()
        )));
    }
    Ok(())
}

/// Nodes where residuals are evaluated: everything except fixed-boundary
/// nodes.
fn is_interior(grid: &SpaceTimeGrid, node: usize) -> bool {
    !grid.is_fixed_node(&grid.node_multi(node))
}

/// Second time difference of phi at a node.
fn acceleration(
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    node: usize,
    level: usize,
) -> DVector<f64> {
    let prev = field.phi_at(grid, level - 1, node);
    let cur = field.phi_at(grid, level, node);
    let next = field.phi_at(grid, level + 1, node);
    (next - 2.0 * cur + prev) / (grid.dt * grid.dt)
}

/// Centered spatial difference of a per-node scalar field.
fn node_field_gradient(
    grid: &SpaceTimeGrid,
    values: &[f64],
    multi: &[usize],
    axis: usize,
) -> f64 {
    let h = grid.spacing(axis);
    match (grid.shift(multi, axis, -1), grid.shift(multi, axis, 1)) {
        (Some(m), Some(p)) => {
            (values[grid.node_flat(&p)] - values[grid.node_flat(&m)]) / (2.0 * h)
        }
        _ => 0.0,
    }
}

/// rho g_ab (covariant acceleration)^b at one node.
fn inertia_term(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    node: usize,
    level: usize,
    jet: &JetSample,
) -> Result<DVector<f64>> {
    let accel = acceleration(grid, field, node, level);
    let v0 = jet.time_velocity();
    let cov = model
        .fiber_metric
        .covariant_accel(jet.y.as_slice(), &v0, &accel)?;
    let g = model.fiber_metric.eval(jet.y.as_slice())?;
    Ok(model.rho_at(&jet.x) * (g * cov))
}

/// General-form residual: numerically differentiates the Lagrangian
/// density in its y and v slots, then applies grid differences. Serves as
/// the independent oracle for the specialized formulations. Uses the
/// augmented density when the field carries a multiplier.
pub fn el_residual_general(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> Result<ELResidual> {
    check_level(field, level)?;
    let n = grid.n_space();
    let nc = field.n_comp;
    let constrained = field.levels[level].lambda.is_some();
    let density = |s: &JetSample| -> Result<f64> {
        if constrained {
            model.augmented_lagrangian(s)
        } else {
            model.lagrangian_density(s)
        }
    };

    // Slot momenta p^mu_a = dL/dv^a_mu at every node of three levels.
    let momenta_at = |lvl: usize, node: usize| -> Result<DMatrix<f64>> {
        let jet = jet_extend(grid, field, node, lvl)?;
        let mut p = DMatrix::zeros(nc, n + 1);
        for a in 0..nc {
            for mu in 0..=n {
                let h = 1e-6 * (1.0 + jet.v[(a, mu)].abs());
                let mut sp = jet.clone();
                let mut sm = jet.clone();
                sp.v[(a, mu)] += h;
                sm.v[(a, mu)] -= h;
                p[(a, mu)] = (density(&sp)? - density(&sm)?) / (2.0 * h);
            }
        }
        Ok(p)
    };
    let levels = [level - 1, level, level + 1];
    let mut p_fields: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(3);
    for &lvl in &levels {
        let p: Result<Vec<_>> = exec::map_default(grid.n_nodes(), |node| momenta_at(lvl, node))
            .into_iter()
            .collect();
        p_fields.push(p?);
    }

    let values = exec::map_default(grid.n_nodes(), |node| -> Result<Option<DVector<f64>>> {
        if !is_interior(grid, node) {
            return Ok(None);
        }
        let multi = grid.node_multi(node);
        let jet = jet_extend(grid, field, node, level)?;
        let sqrt_g = model.base_metric.det_sqrt(&jet.x)?;
        let mut r = DVector::zeros(nc);
        for a in 0..nc {
            // d/dt of p^0.
            let d0 = (p_fields[2][node][(a, 0)] - p_fields[0][node][(a, 0)]) / (2.0 * grid.dt);
            // Spatial divergence of p^k.
            let mut div = 0.0;
            for k in 0..n {
                let h = grid.spacing(k);
                if let (Some(m), Some(p)) =
                    (grid.shift(&multi, k, -1), grid.shift(&multi, k, 1))
                {
                    div += (p_fields[1][grid.node_flat(&p)][(a, k + 1)]
                        - p_fields[1][grid.node_flat(&m)][(a, k + 1)])
                        / (2.0 * h);
                }
            }
            // dL/dy^a by a central difference in the fiber slot.
            let h = 1e-6 * (1.0 + jet.y[a].abs());
            let mut sp = jet.clone();
            let mut sm = jet.clone();
            sp.y[a] += h;
            sm.y[a] -= h;
            let dldy = (density(&sp)? - density(&sm)?) / (2.0 * h);
            r[a] = (d0 + div - dldy) / sqrt_g;
        }
        Ok(Some(r))
    });
    let values: Result<Vec<_>> = values.into_iter().collect();
    Ok(ELResidual::from_values(values?))
}

/// Continuum-form residual assembled from geometry and material
/// primitives:
/// rho g (cov accel) - (1/sqrt G) d_k(rho sqrt(G) dW/dv^a_k)
/// + rho (dW/dg_bc)(dg_bc/dy^a).
pub fn el_residual_continuum(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> Result<ELResidual> {
    check_level(field, level)?;
    let n = grid.n_space();
    let nc = field.n_comp;

    // Per-node flux Q_a^k = rho sqrt(G) dW/dv^a_k.
    let flux: Result<Vec<DMatrix<f64>>> =
        exec::map_default(grid.n_nodes(), |node| -> Result<DMatrix<f64>> {
            let jet = jet_extend(grid, field, node, level)?;
            let big_g = model.base_metric.eval(&jet.x)?;
            let g = model.fiber_metric.eval(jet.y.as_slice())?;
            let dwdv = model.energy.d_dv(&big_g, &g, &jet.spatial_block())?;
            Ok(model.rho_at(&jet.x) * big_g.determinant().sqrt() * dwdv)
        })
        .into_iter()
        .collect();
    let flux = flux?;

    let values = exec::map_default(grid.n_nodes(), |node| -> Result<Option<DVector<f64>>> {
        if !is_interior(grid, node) {
            return Ok(None);
        }
        let multi = grid.node_multi(node);
        let jet = jet_extend(grid, field, node, level)?;
        let sqrt_g = model.base_metric.det_sqrt(&jet.x)?;
        let mut r = inertia_term(model, grid, field, node, level, &jet)?;
        for a in 0..nc {
            let mut div = 0.0;
            for k in 0..n {
                let h = grid.spacing(k);
                if let (Some(m), Some(p)) =
                    (grid.shift(&multi, k, -1), grid.shift(&multi, k, 1))
                {
                    div += (flux[grid.node_flat(&p)][(a, k)]
                        - flux[grid.node_flat(&m)][(a, k)])
                        / (2.0 * h);
                }
            }
            r[a] -= div / sqrt_g;
        }
        // Metric-gradient term, nonzero only on curved fiber metrics.
        if !model.fiber_metric.is_flat() {
            let big_g = model.base_metric.eval(&jet.x)?;
            let g = model.fiber_metric.eval(jet.y.as_slice())?;
            let dwdg = model.energy.d_dg(&big_g, &g, &jet.spatial_block())?;
            let dg = model.fiber_metric.deriv(jet.y.as_slice())?;
            let rho = model.rho_at(&jet.x);
            for a in 0..nc {
                let mut s = 0.0;
                for b in 0..nc {
                    for c in 0..nc {
                        s += dwdg[(b, c)] * dg[a][(b, c)];
                    }
                }
                r[a] += rho * s;
            }
        }
        Ok(Some(r))
    });
    let values: Result<Vec<_>> = values.into_iter().collect();
    Ok(ELResidual::from_values(values?))
}

/// Barotropic residual rho g (cov accel) + (d_k P) J (F^-1)^k_a with the
/// pressure P = -rho w'(J) evaluated as a node field.
pub fn el_residual_barotropic(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> Result<ELResidual> {
    if !matches!(model.energy, StoredEnergy::Barotropic(_)) {
        return Err(Error::WrongEnergyKind {
            expected: "barotropic".into(),
            found: model.energy.kind_name().into(),
        });
    }
    check_level(field, level)?;
    let pressure: Result<Vec<f64>> = exec::map_default(grid.n_nodes(), |node| {
        let jet = jet_extend(grid, field, node, level)?;
        model.material_pressure(&jet)
    })
    .into_iter()
    .collect();
    pressure_force_residual(model, grid, field, level, &pressure?, false)
}

/// Shared assembly for pressure-driven residuals: inertia plus
/// (d_k P) J (F^-1)^k_a, optionally on top of the continuum residual.
fn pressure_force_residual(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
    pressure: &[f64],
    add_continuum: bool,
) -> Result<ELResidual> {
    let n = grid.n_space();
    let base = if add_continuum {
        Some(el_residual_continuum(model, grid, field, level)?)
    } else {
        None
    };
    let values = exec::map_default(grid.n_nodes(), |node| -> Result<Option<DVector<f64>>> {
        if !is_interior(grid, node) {
            return Ok(None);
        }
        let multi = grid.node_multi(node);
        let jet = jet_extend(grid, field, node, level)?;
        let f = jet.spatial_block();
        let f_inv = f.clone().try_inverse().ok_or(Error::NonRegular {
            det: f.determinant(),
            floor: 0.0,
        })?;
        let j = model.jacobian(&jet)?;
        let mut r = match &base {
            Some(b) => b.values[node].clone().unwrap(),
            None => inertia_term(model, grid, field, node, level, &jet)?,
        };
        for a in 0..jet.n_comp() {
            let mut force = 0.0;
            for k in 0..n {
                force += node_field_gradient(grid, pressure, &multi, k) * f_inv[(k, a)];
            }
            r[a] += j * force;
        }
        Ok(Some(r))
    });
    let values: Result<Vec<_>> = values.into_iter().collect();
    Ok(ELResidual::from_values(values?))
}

/// Elastic residual rho g (cov accel) - DIV P with the covariant
/// divergence DIV P_a = d_i P_a^i + P_a^j Gamma^k_jk - P_b^i gamma^b_ac F^c_i.
pub fn el_residual_elastic(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> Result<ELResidual> {
    if !model.energy.is_elastic() {
        return Err(Error::WrongEnergyKind {
            expected: "stvenant or neohookean".into(),
            found: model.energy.kind_name().into(),
        });
    }
    check_level(field, level)?;
    let n = grid.n_space();
    let nc = field.n_comp;
    let piola: Result<Vec<DMatrix<f64>>> = exec::map_default(grid.n_nodes(), |node| {
        let jet = jet_extend(grid, field, node, level)?;
        model.piola_kirchhoff(&jet)
    })
    .into_iter()
    .collect();
    let piola = piola?;

    let flat_base = model.base_metric.is_flat();
    let flat_fiber = model.fiber_metric.is_flat();
    let values = exec::map_default(grid.n_nodes(), |node| -> Result<Option<DVector<f64>>> {
        if !is_interior(grid, node) {
            return Ok(None);
        }
        let multi = grid.node_multi(node);
        let jet = jet_extend(grid, field, node, level)?;
        let mut r = inertia_term(model, grid, field, node, level, &jet)?;
        let pk = &piola[node];
        for a in 0..nc {
            let mut div = 0.0;
            for i in 0..n {
                let h = grid.spacing(i);
                if let (Some(m), Some(p)) =
                    (grid.shift(&multi, i, -1), grid.shift(&multi, i, 1))
                {
                    div += (piola[grid.node_flat(&p)][(a, i)]
                        - piola[grid.node_flat(&m)][(a, i)])
                        / (2.0 * h);
                }
            }
            r[a] -= div;
        }
        if !flat_base {
            let chr = model.base_metric.christoffel(&jet.x)?;
            for a in 0..nc {
                let mut s = 0.0;
                for j in 0..n {
                    let mut trace = 0.0;
                    for k in 0..n {
                        trace += chr.gamma[k][(j, k)];
                    }
                    s += pk[(a, j)] * trace;
                }
                r[a] -= s;
            }
        }
        if !flat_fiber {
            let gam = model.fiber_metric.christoffel(jet.y.as_slice())?;
            let f = jet.spatial_block();
            for a in 0..nc {
                let mut s = 0.0;
                for b in 0..nc {
                    for c in 0..nc {
                        for i in 0..n {
                            s += gam.gamma[b][(a, c)] * f[(c, i)] * pk[(b, i)];
                        }
                    }
                }
                r[a] += s;
            }
        }
        Ok(Some(r))
    });
    let values: Result<Vec<_>> = values.into_iter().collect();
    Ok(ELResidual::from_values(values?))
}

/// Per-cell constraint values Phi = J(cell jet) - 1.
pub fn induced_constraint(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> Result<Vec<f64>> {
    let out: Result<Vec<f64>> = exec::map_default(grid.n_cells(), |c| {
        let jet = cell_jet(grid, field, level, c)?;
        Ok(model.jacobian(&jet)? - 1.0)
    })
    .into_iter()
    .collect();
    out
}

/// Constrained residual: continuum residual plus the multiplier pressure
/// force, paired with the constraint values.
pub fn el_residual_constrained(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    state: &ConstrainedState,
    level: usize,
) -> Result<(ELResidual, Vec<f64>)> {
    let field = &state.field;
    check_level(field, level)?;
    // Node-valued multiplier pressure P = lambda / sqrt(det G).
    let pressure: Result<Vec<f64>> = (0..grid.n_nodes())
        .map(|node| {
            let multi = grid.node_multi(node);
            let lam = field
                .lambda_at_node(grid, level, &multi)
                .ok_or(Error::MissingMultiplier)?;
            let x = grid.node_coords(&multi);
            Ok(lam / model.base_metric.det_sqrt(&x)?)
        })
        .collect();
    let residual = pressure_force_residual(model, grid, field, level, &pressure?, true)?;
    let constraint = induced_constraint(model, grid, field, level)?;
    Ok((residual, constraint))
}

/// Splits the total pressure into the constitutive part P_W = -rho w'(J)
/// and the multiplier part P_lambda = lambda / sqrt(det G), per cell.
pub fn pressure_decomposition(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    state: &ConstrainedState,
    level: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p_lambda = state.pressure(grid, model, level)?;
    let mut p_w = vec![0.0; grid.n_cells()];
    match &model.energy {
        StoredEnergy::Constant(_) => {}
        StoredEnergy::Barotropic(law) => {
            for (c, slot) in p_w.iter_mut().enumerate() {
                let jet = cell_jet(grid, &state.field, level, c)?;
                *slot = -model.rho_at(&jet.x) * law.dw(model.jacobian(&jet)?);
            }
        }
        other => {
            return Err(Error::WrongEnergyKind {
                expected: "constant or barotropic".into(),
                found: other.kind_name().into(),
            })
        }
    }
    Ok((p_w, p_lambda))
}

/// Residual of the spatial pressure Poisson equation
/// Lap p + div((u . grad) u) on flat metrics, with u and p transported to
/// the spatial grid through the inverse deformation (nearest node plus one
/// Newton correction).
pub fn pressure_poisson_residual(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    state: &ConstrainedState,
    level: usize,
) -> Result<Vec<Option<f64>>> {
    if !model.base_metric.is_flat() || !model.fiber_metric.is_flat() {
        return Err(Error::DomainError {
            point: vec![],
            reason: "pressure Poisson check requires flat metrics".into(),
        });
    }
    let field = &state.field;
    check_level(field, level)?;
    let n = grid.n_space();
    let n_nodes = grid.n_nodes();

    // Material node data: placement, velocity, total pressure.
    let mut phi = Vec::with_capacity(n_nodes);
    let mut vel = Vec::with_capacity(n_nodes);
    let mut pres = Vec::with_capacity(n_nodes);
    let (p_w_cells, p_l_cells) = pressure_decomposition(model, grid, state, level)?;
    let p_cells: Vec<f64> = p_w_cells
        .iter()
        .zip(&p_l_cells)
        .map(|(a, b)| a + b)
        .collect();
    for node in 0..n_nodes {
        let jet = jet_extend(grid, field, node, level)?;
        phi.push(jet.y.clone());
        vel.push(jet.time_velocity());
        // Node pressure: average of incident cell pressures.
        let multi = grid.node_multi(node);
        let mut sum = 0.0;
        let mut count = 0.0;
        for corner in 0..(1usize << n) {
            let mut cell = vec![0usize; n];
            let mut ok = true;
            for k in 0..n {
                let bit = (corner >> k) & 1;
                let raw = multi[k] as isize - bit as isize;
                match grid.boundary[k] {
                    crate::fields::Boundary::Periodic => {
                        cell[k] = raw.rem_euclid(grid.cells(k) as isize) as usize;
                    }
                    crate::fields::Boundary::Fixed => {
                        if raw < 0 || raw >= grid.cells(k) as isize {
                            ok = false;
                            break;
                        }
                        cell[k] = raw as usize;
                    }
                }
            }
            if ok {
                sum += p_cells[grid.cell_flat(&cell)];
                count += 1.0;
            }
        }
        pres.push(sum / count);
    }

    // Wrapped distance between a placement and a spatial target point.
    let wrapped_diff = |from: &DVector<f64>, to: &[f64]| -> DVector<f64> {
        DVector::from_fn(n, |k, _| {
            let mut d = to[k] - from[k];
            if grid.boundary[k] == crate::fields::Boundary::Periodic {
                let span = grid.extents[k][1] - grid.extents[k][0];
                d -= (d / span).round() * span;
            }
            d
        })
    };

    // Spatial fields u(xi) and p(xi) on the grid via phi^-1.
    let mut u_sp = vec![DVector::zeros(n); n_nodes];
    let mut p_sp = vec![0.0; n_nodes];
    for target in 0..n_nodes {
        let xi = grid.node_coords(&grid.node_multi(target));
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for node in 0..n_nodes {
            let d = wrapped_diff(&phi[node], &xi).norm_squared();
            if d < best_d {
                best_d = d;
                best = node;
            }
        }
        let jet = jet_extend(grid, field, best, level)?;
        let f = jet.spatial_block();
        let f_inv = f.clone().try_inverse().ok_or(Error::NonRegular {
            det: f.determinant(),
            floor: 0.0,
        })?;
        let dx = f_inv * wrapped_diff(&phi[best], &xi);
        // First-order correction of u and p around the nearest node.
        let multi = grid.node_multi(best);
        let mut u = vel[best].clone();
        let mut p = pres[best];
        for k in 0..n {
            let h = grid.spacing(k);
            if let (Some(m), Some(pl)) = (grid.shift(&multi, k, -1), grid.shift(&multi, k, 1))
            {
                let du = (&vel[grid.node_flat(&pl)] - &vel[grid.node_flat(&m)]) / (2.0 * h);
                u += du * dx[k];
                p += node_field_gradient(grid, &pres, &multi, k) * dx[k];
            }
        }
        u_sp[target] = u;
        p_sp[target] = p;
    }

    // Advection term w_i = sum_j u_j d_j u_i on the spatial grid.
    let mut advect = vec![DVector::zeros(n); n_nodes];
    for node in 0..n_nodes {
        let multi = grid.node_multi(node);
        let mut w = DVector::zeros(n);
        for j in 0..n {
            let h = grid.spacing(j);
            if let (Some(m), Some(p)) = (grid.shift(&multi, j, -1), grid.shift(&multi, j, 1)) {
                let du = (&u_sp[grid.node_flat(&p)] - &u_sp[grid.node_flat(&m)]) / (2.0 * h);
                w += du * u_sp[node][j];
            }
        }
        advect[node] = w;
    }

    // Residual: 5-point Laplacian of p plus divergence of the advection.
    let mut out = vec![None; n_nodes];
    for node in 0..n_nodes {
        let multi = grid.node_multi(node);
        if grid.is_fixed_node(&multi) {
            continue;
        }
        let mut lap = 0.0;
        let mut div = 0.0;
        let mut full = true;
        for k in 0..n {
            let h = grid.spacing(k);
            match (grid.shift(&multi, k, -1), grid.shift(&multi, k, 1)) {
                (Some(m), Some(p)) => {
                    let (im, ip) = (grid.node_flat(&m), grid.node_flat(&p));
                    lap += (p_sp[ip] - 2.0 * p_sp[node] + p_sp[im]) / (h * h);
                    div += (advect[ip][k] - advect[im][k]) / (2.0 * h);
                }
                _ => full = false,
            }
        }
        if full {
            out[node] = Some(lap + div);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::Boundary;
    use crate::geometry::MetricField;
    use crate::material::BarotropicLaw;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    const TAU: f64 = std::f64::consts::TAU;

    fn quadratic() -> StoredEnergy {
        StoredEnergy::Barotropic(BarotropicLaw::Quadratic { k: 1.0 })
    }

    fn flat_model(energy: StoredEnergy, rho: f64, n: usize) -> MaterialModel {
        MaterialModel::uniform(
            rho,
            energy,
            MetricField::euclidean(n),
            MetricField::euclidean(n),
        )
    }

    fn periodic_grid(n_space: usize, nodes: usize, dt: f64) -> SpaceTimeGrid {
        SpaceTimeGrid::new(
            vec![[0.0, TAU]; n_space],
            vec![nodes; n_space],
            dt,
            vec![Boundary::Periodic; n_space],
        )
        .unwrap()
    }

    /// Section phi(x, t) sampled at `n_levels` time levels.
    fn section(
        grid: &SpaceTimeGrid,
        n_comp: usize,
        n_levels: usize,
        f: impl Fn(&[f64], f64) -> Vec<f64>,
    ) -> ConfigurationField {
        let mut field = ConfigurationField::new(n_comp).with_identity_wrap(grid);
        for level in 0..n_levels {
            let t = level as f64 * grid.dt;
            let l = ConfigurationField::level_from_fn(grid, n_comp, |x| f(x, t));
            field.push_level(grid, l).unwrap();
        }
        field
    }

    #[test]
    fn general_residual_vanishes_for_static_identity() {
        let grid = periodic_grid(2, 8, 0.05);
        let model = flat_model(StoredEnergy::Constant(1.0), 1.0, 2);
        let field = section(&grid, 2, 3, |x, _| x.to_vec());
        let r = el_residual_general(&model, &grid, &field, 1).unwrap();
        assert!(r.worst < 1e-8, "worst {}", r.worst);
    }

    #[test]
    fn general_residual_vanishes_for_uniform_flow() {
        let grid = periodic_grid(2, 8, 0.05);
        let model = flat_model(quadratic(), 1.0, 2);
        let field = section(&grid, 2, 3, |x, t| vec![x[0] + 0.3 * t, x[1] - 0.1 * t]);
        let r = el_residual_general(&model, &grid, &field, 1).unwrap();
        assert!(r.worst < 1e-7, "worst {}", r.worst);
    }

    #[test]
    fn general_matches_barotropic_on_manufactured_section() {
        let grid = periodic_grid(1, 32, 0.02);
        let model = flat_model(quadratic(), 1.0, 1);
        // Wave speed 2 is off the sound speed, so the residual is O(eps).
        let eps = 0.05;
        let field = section(&grid, 1, 3, |x, t| vec![x[0] + eps * (x[0] - 2.0 * t).sin()]);
        let general = el_residual_general(&model, &grid, &field, 1).unwrap();
        let baro = el_residual_barotropic(&model, &grid, &field, 1).unwrap();
        let diff = general.max_difference(&baro);
        // Both are O(h^2) discretizations of the same equation.
        assert!(diff < 5e-3, "difference {diff}, worst {}", general.worst);
        assert!(general.worst > 1e-3, "section should not be a solution");
    }

    #[test]
    fn continuum_matches_general_on_polar_metric() {
        // Section maps into an annulus, fiber metric polar.
        let grid = SpaceTimeGrid::new(
            vec![[0.0, TAU]],
            vec![48],
            0.01,
            vec![Boundary::Periodic],
        )
        .unwrap();
        let model = MaterialModel::uniform(
            1.0,
            StoredEnergy::Constant(0.5),
            MetricField::euclidean(1),
            MetricField::polar(),
        );
        let mut field = ConfigurationField::new(2);
        for level in 0..3 {
            let t = level as f64 * grid.dt;
            let l = ConfigurationField::level_from_fn(&grid, 2, |x| {
                vec![1.5 + 0.2 * (x[0] + t).sin(), 0.3 * (x[0] - t).cos()]
            });
            field.push_level(&grid, l).unwrap();
        }
        let general = el_residual_general(&model, &grid, &field, 1).unwrap();
        let cm = el_residual_continuum(&model, &grid, &field, 1).unwrap();
        let diff = general.max_difference(&cm);
        let scale = general.worst.max(1.0);
        assert!(diff / scale < 2e-3, "difference {diff}, worst {}", general.worst);
    }

    #[test]
    fn continuum_flat_reduction_term_by_term() {
        // With constant metrics the residual must equal
        // rho phidd - d_k(rho dW/dv^a_k) assembled directly.
        let grid = periodic_grid(1, 24, 0.02);
        let model = flat_model(quadratic(), 1.3, 1);
        let field = section(&grid, 1, 3, |x, t| {
            vec![x[0] + 0.1 * (x[0]).sin() * (1.0 + 0.5 * t)]
        });
        let cm = el_residual_continuum(&model, &grid, &field, 1).unwrap();
        let flux: Vec<f64> = (0..grid.n_nodes())
            .map(|node| {
                let jet = jet_extend(&grid, &field, node, 1).unwrap();
                let eye = DMatrix::identity(1, 1);
                1.3 * model
                    .energy
                    .d_dv(&eye, &eye, &jet.spatial_block())
                    .unwrap()[(0, 0)]
            })
            .collect();
        for node in 0..grid.n_nodes() {
            let expected = 1.3 * acceleration(&grid, &field, node, 1)[0]
                - node_field_gradient(&grid, &flux, &grid.node_multi(node), 0);
            assert_relative_eq!(
                cm.values[node].as_ref().unwrap()[0],
                expected,
                epsilon = 1e-12,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn barotropic_uniform_dilation_is_static_solution() {
        let grid = periodic_grid(1, 16, 0.05);
        let model = flat_model(quadratic(), 1.0, 1);
        let alpha = 1.3;
        let mut field = ConfigurationField::new(1);
        let mut w = DMatrix::zeros(1, 1);
        w[(0, 0)] = alpha * TAU;
        field.wrap_shift = Some(w);
        for _ in 0..3 {
            let l = ConfigurationField::level_from_fn(&grid, 1, |x| vec![alpha * x[0]]);
            field.push_level(&grid, l).unwrap();
        }
        let r = el_residual_barotropic(&model, &grid, &field, 1).unwrap();
        assert!(r.worst < 1e-12, "worst {}", r.worst);
    }

    #[test]
    fn elastic_residual_cases() {
        let sv = StoredEnergy::StVenant {
            lambda: 1.0,
            mu: 0.5,
        };
        let grid = periodic_grid(1, 32, 0.005);
        let model = flat_model(sv.clone(), 1.0, 1);
        // Stress-free static reference.
        let field = section(&grid, 1, 3, |x, _| x.to_vec());
        let r = el_residual_elastic(&model, &grid, &field, 1).unwrap();
        assert!(r.worst < 1e-12);

        // Small-amplitude standing wave of the linearized bar equation.
        let c = ((1.0f64 + 2.0 * 0.5) / 1.0).sqrt();
        let eps = 1e-4;
        let field = section(&grid, 1, 3, |x, t| {
            vec![x[0] + eps * x[0].sin() * (c * t).cos()]
        });
        let r = el_residual_elastic(&model, &grid, &field, 1).unwrap();
        // Individual terms have size rho c^2 eps; the residual must be the
        // O(eps^2) + O(h^2 eps) remainder.
        let term_scale = c * c * eps;
        assert!(
            r.worst < 0.02 * term_scale,
            "worst {} vs term scale {term_scale}",
            r.worst
        );

        let wrong = flat_model(quadratic(), 1.0, 1);
        assert!(matches!(
            el_residual_elastic(&wrong, &grid, &field, 1),
            Err(Error::WrongEnergyKind { .. })
        ));
    }

    #[test]
    fn general_matches_elastic_oracle() {
        let sv = StoredEnergy::StVenant {
            lambda: 1.0,
            mu: 0.5,
        };
        let grid = periodic_grid(1, 32, 0.01);
        let model = flat_model(sv, 1.0, 1);
        let field = section(&grid, 1, 3, |x, t| {
            vec![x[0] + 0.08 * (x[0] + 0.5 * t).sin()]
        });
        let general = el_residual_general(&model, &grid, &field, 1).unwrap();
        let elastic = el_residual_elastic(&model, &grid, &field, 1).unwrap();
        let diff = general.max_difference(&elastic);
        assert!(diff < 5e-3, "difference {diff}");
    }

    #[test]
    fn induced_constraint_values() {
        let grid = periodic_grid(2, 8, 0.05);
        let model = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        let field = section(&grid, 2, 1, |x, _| x.to_vec());
        let phi = induced_constraint(&model, &grid, &field, 0).unwrap();
        assert!(phi.iter().all(|v| v.abs() < 1e-13));

        // 1D dilation phi = 2x: J = 2 everywhere.
        let grid1 = periodic_grid(1, 8, 0.05);
        let model1 = flat_model(StoredEnergy::Constant(0.0), 1.0, 1);
        let mut field1 = ConfigurationField::new(1);
        let mut w = DMatrix::zeros(1, 1);
        w[(0, 0)] = 2.0 * TAU;
        field1.wrap_shift = Some(w);
        let l = ConfigurationField::level_from_fn(&grid1, 1, |x| vec![2.0 * x[0]]);
        field1.push_level(&grid1, l).unwrap();
        let phi = induced_constraint(&model1, &grid1, &field1, 0).unwrap();
        assert!(phi.iter().all(|v| (v - 1.0).abs() < 1e-12));

        // Area-preserving shear.
        let cshear = 0.4;
        let mut field2 = ConfigurationField::new(2);
        let mut w = DMatrix::zeros(2, 2);
        w[(0, 0)] = TAU;
        w[(1, 1)] = TAU;
        w[(0, 1)] = cshear * TAU;
        field2.wrap_shift = Some(w);
        let l = ConfigurationField::level_from_fn(&grid, 2, |x| {
            vec![x[0] + cshear * x[1], x[1]]
        });
        field2.push_level(&grid, l).unwrap();
        let phi = induced_constraint(&model, &grid, &field2, 0).unwrap();
        assert!(phi.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constrained_rest_state() {
        let grid = periodic_grid(2, 8, 0.05);
        let model = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        let mut field = section(&grid, 2, 3, |x, _| x.to_vec());
        for level in &mut field.levels {
            level.lambda = Some(vec![0.7; grid.n_cells()]);
        }
        let state = ConstrainedState::new(field).unwrap();
        let (r, phi) = el_residual_constrained(&model, &grid, &state, 1).unwrap();
        assert!(r.worst < 1e-12, "worst {}", r.worst);
        assert!(phi.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constrained_matches_general_oracle() {
        // Random-ish smooth section with a smooth multiplier; the closed
        // form and the direct differentiation of the augmented density must
        // agree to discretization error.
        let grid = periodic_grid(1, 48, 0.01);
        let model = flat_model(StoredEnergy::Constant(0.0), 1.0, 1);
        let mut field = section(&grid, 1, 3, |x, t| {
            vec![x[0] + 0.05 * (x[0] + t).sin()]
        });
        for level in &mut field.levels {
            let lam: Vec<f64> = (0..grid.n_cells())
                .map(|c| {
                    let x = grid.cell_center(&grid.cell_multi(c));
                    0.3 * (2.0 * x[0]).cos()
                })
                .collect();
            level.lambda = Some(lam);
        }
        let state = ConstrainedState::new(field.clone()).unwrap();
        let (res, _) = el_residual_constrained(&model, &grid, &state, 1).unwrap();
        let general = el_residual_general(&model, &grid, &field, 1).unwrap();
        let diff = res.max_difference(&general);
        let scale = general.worst.max(1e-10);
        assert!(
            diff / scale < 0.05,
            "relative difference {}",
            diff / scale
        );
    }

    #[test]
    fn pressure_decomposition_cases() {
        let grid = periodic_grid(2, 8, 0.05);
        let mut field = section(&grid, 2, 1, |x, _| x.to_vec());
        field.levels[0].lambda = Some(vec![2.0; grid.n_cells()]);
        let state = ConstrainedState::new(field).unwrap();

        let m = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        let (pw, pl) = pressure_decomposition(&m, &grid, &state, 0).unwrap();
        assert!(pw.iter().all(|v| *v == 0.0));
        assert!(pl.iter().all(|v| (v - 2.0).abs() < 1e-13));

        let m = flat_model(quadratic(), 1.0, 2);
        let (pw, _) = pressure_decomposition(&m, &grid, &state, 0).unwrap();
        // J = 1 and w'(1) = 0: the constitutive pressure vanishes exactly.
        assert!(pw.iter().all(|v| v.abs() < 1e-12));

        // Law with w'(1) != 0: P_W uniform equal to -rho w'(1).
        let law = BarotropicLaw::Custom {
            w: std::sync::Arc::new(|j: f64| 0.5 * j * j),
            dw: std::sync::Arc::new(|j: f64| j),
            d2w: None,
        };
        let m = flat_model(StoredEnergy::Barotropic(law), 2.0, 2);
        let (pw, _) = pressure_decomposition(&m, &grid, &state, 0).unwrap();
        assert!(pw.iter().all(|v| (v + 2.0).abs() < 1e-10));
    }

    #[test]
    fn pressure_poisson_trivial_cases() {
        let grid = periodic_grid(2, 12, 0.02);
        let model = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        // Rest state, constant pressure.
        let mut field = section(&grid, 2, 3, |x, _| x.to_vec());
        for level in &mut field.levels {
            level.lambda = Some(vec![1.1; grid.n_cells()]);
        }
        let state = ConstrainedState::new(field).unwrap();
        let r = pressure_poisson_residual(&model, &grid, &state, 1).unwrap();
        let worst = r.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-10, "worst {worst}");

        // Uniform flow, constant pressure.
        let mut field = section(&grid, 2, 3, |x, t| vec![x[0] + 0.2 * t, x[1] - 0.3 * t]);
        for level in &mut field.levels {
            level.lambda = Some(vec![0.4; grid.n_cells()]);
        }
        let state = ConstrainedState::new(field).unwrap();
        let r = pressure_poisson_residual(&model, &grid, &state, 1).unwrap();
        let worst = r.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-9, "worst {worst}");
    }

    #[test]
    fn pressure_poisson_taylor_green() {
        // u = (sin x cos y, -cos x sin y), p = (cos 2x + cos 2y)/4 solve
        // Lap p = -div((u.grad)u); for this field the centered-difference
        // operators cancel exactly, so the residual sits at roundoff.
        let mut errs = Vec::new();
        for nodes in [16, 32] {
            let grid = periodic_grid(2, nodes, 0.01);
            let model = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
            let mut field = ConfigurationField::new(2).with_identity_wrap(&grid);
            for level in 0..3usize {
                let t = (level as f64 - 1.0) * grid.dt;
                let l = ConfigurationField::level_from_fn(&grid, 2, |x| {
                    vec![
                        x[0] + t * x[0].sin() * x[1].cos(),
                        x[1] - t * x[0].cos() * x[1].sin(),
                    ]
                });
                field.push_level(&grid, l).unwrap();
            }
            for level in &mut field.levels {
                let lam: Vec<f64> = (0..grid.n_cells())
                    .map(|c| {
                        let x = grid.cell_center(&grid.cell_multi(c));
                        0.25 * ((2.0 * x[0]).cos() + (2.0 * x[1]).cos())
                    })
                    .collect();
                level.lambda = Some(lam);
            }
            let state = ConstrainedState::new(field).unwrap();
            let r = pressure_poisson_residual(&model, &grid, &state, 1).unwrap();
            let worst = r.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            errs.push(worst);
        }
        assert!(
            errs.iter().all(|e| *e < 1e-10),
            "residuals {errs:?}"
        );
    }
}
