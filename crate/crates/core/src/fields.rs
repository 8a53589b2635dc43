//! Space-time grids, configuration fields and finite-difference first jets.
//!
//! A configuration field stores nodal values of the placement map phi (and,
//! in constrained runs, one Lagrange multiplier per spatial cell) at a
//! sequence of time levels. Jet extension produces the pointwise data
//! (x, t, y, v) that the material and dynamics layers consume.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Determinant floor below which a deformation counts as non-regular.
pub const REGULARITY_FLOOR: f64 = 1e-10;

/// Boundary treatment per spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// Wrapping axis: node i and node i + nodes are identified, spacing is
    /// (max - min) / nodes.
    Periodic,
    /// End nodes hold their initial (Dirichlet) values at every level;
    /// spacing is (max - min) / (nodes - 1).
    Fixed,
}

/// Rectilinear grid on B x R with uniform spacing per axis and a fixed
/// time step.
#[derive(Debug, Clone)]
pub struct SpaceTimeGrid {
    pub extents: Vec<[f64; 2]>,
    pub nodes: Vec<usize>,
    pub dt: f64,
    pub boundary: Vec<Boundary>,
}

impl SpaceTimeGrid {
    pub fn new(
        extents: Vec<[f64; 2]>,
        nodes: Vec<usize>,
        dt: f64,
        boundary: Vec<Boundary>,
    ) -> Result<Self> {
        let n = extents.len();
        if nodes.len() != n || boundary.len() != n {
            return Err(Error::ShapeError(
                "extents, nodes and boundary must have one entry per spatial axis".into(),
            ));
        }
        if n == 0 || n > 2 {
            return Err(Error::ShapeError(format!(
                "grid supports 1 or 2 spatial dimensions, got {n}"
            )));
        }
        for (k, e) in extents.iter().enumerate() {
            if !(e[1] > e[0]) {
                return Err(Error::ShapeError(format!("degenerate extent on axis {k}")));
            }
            if nodes[k] < 3 {
                return Err(Error::ShapeError(format!(
                    "axis {k} needs at least 3 nodes, got {}",
                    nodes[k]
                )));
            }
        }
        if !(dt > 0.0) {
            return Err(Error::ShapeError("time step must be positive".into()));
        }
        Ok(Self {
            extents,
            nodes,
            dt,
            boundary,
        })
    }

    pub fn n_space(&self) -> usize {
        self.extents.len()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let span = self.extents[axis][1] - self.extents[axis][0];
        match self.boundary[axis] {
            Boundary::Periodic => span / self.nodes[axis] as f64,
            Boundary::Fixed => span / (self.nodes[axis] as f64 - 1.0),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.iter().product()
    }

    /// Cells per axis: periodic axes have as many cells as nodes.
    pub fn cells(&self, axis: usize) -> usize {
        match self.boundary[axis] {
            Boundary::Periodic => self.nodes[axis],
            Boundary::Fixed => self.nodes[axis] - 1,
        }
    }

    pub fn n_cells(&self) -> usize {
        (0..self.n_space()).map(|k| self.cells(k)).product()
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.n_space()).map(|k| self.spacing(k)).product()
    }

    pub fn node_multi(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        let mut out = vec![0; self.n_space()];
        for k in (0..self.n_space()).rev() {
            out[k] = rest % self.nodes[k];
            rest /= self.nodes[k];
        }
        out
    }

    pub fn node_flat(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        for k in 0..self.n_space() {
            flat = flat * self.nodes[k] + multi[k];
        }
        flat
    }

    pub fn cell_multi(&self, flat: usize) -> Vec<usize> {
        let mut rest = flat;
        let mut out = vec![0; self.n_space()];
        for k in (0..self.n_space()).rev() {
            out[k] = rest % self.cells(k);
            rest /= self.cells(k);
        }
        out
    }

    pub fn cell_flat(&self, multi: &[usize]) -> usize {
        let mut flat = 0;
        for k in 0..self.n_space() {
            flat = flat * self.cells(k) + multi[k];
        }
        flat
    }

    pub fn node_coords(&self, multi: &[usize]) -> Vec<f64> {
        (0..self.n_space())
            .map(|k| self.extents[k][0] + self.spacing(k) * multi[k] as f64)
            .collect()
    }

    /// Shifts a node index along one axis, wrapping on periodic axes.
    /// Returns None when the shift leaves a fixed axis.
    pub fn shift(&self, multi: &[usize], axis: usize, by: isize) -> Option<Vec<usize>> {
        self.shift_wrapped(multi, axis, by).map(|(m, _)| m)
    }

    /// Like `shift` but also reports how many times the index wrapped
    /// around a periodic axis (signed).
    pub fn shift_wrapped(
        &self,
        multi: &[usize],
        axis: usize,
        by: isize,
    ) -> Option<(Vec<usize>, isize)> {
        let n = self.nodes[axis] as isize;
        let raw = multi[axis] as isize + by;
        let (idx, wrap) = match self.boundary[axis] {
            Boundary::Periodic => (raw.rem_euclid(n), raw.div_euclid(n)),
            Boundary::Fixed => {
                if raw < 0 || raw >= n {
                    return None;
                }
                (raw, 0)
            }
        };
        let mut out = multi.to_vec();
        out[axis] = idx as usize;
        Some((out, wrap))
    }

    /// True for nodes pinned by a fixed-boundary axis.
    pub fn is_fixed_node(&self, multi: &[usize]) -> bool {
        (0..self.n_space()).any(|k| {
            self.boundary[k] == Boundary::Fixed
                && (multi[k] == 0 || multi[k] == self.nodes[k] - 1)
        })
    }

    /// Corner node indices of a cell (2^n corners, axis 0 slowest bit last).
    pub fn cell_corners(&self, cell: &[usize]) -> Vec<usize> {
        let n = self.n_space();
        (0..(1usize << n))
            .map(|corner| {
                let multi: Vec<usize> = (0..n)
                    .map(|k| {
                        let bit = (corner >> (n - 1 - k)) & 1;
                        match self.boundary[k] {
                            Boundary::Periodic => (cell[k] + bit) % self.nodes[k],
                            Boundary::Fixed => cell[k] + bit,
                        }
                    })
                    .collect();
                self.node_flat(&multi)
            })
            .collect()
    }

    /// Center coordinates of a cell.
    pub fn cell_center(&self, cell: &[usize]) -> Vec<f64> {
        (0..self.n_space())
            .map(|k| self.extents[k][0] + self.spacing(k) * (cell[k] as f64 + 0.5))
            .collect()
    }
}

/// Field values at one time level: phi node-major with `n_comp` components
/// per node, lambda one value per spatial cell when present.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeLevel {
    pub phi: Vec<f64>,
    pub lambda: Option<Vec<f64>>,
}

/// Nodal values of the section phi (and multiplier) at a sequence of
/// equally spaced time levels.
#[derive(Debug, Clone)]
pub struct ConfigurationField {
    pub n_comp: usize,
    pub levels: Vec<TimeLevel>,
    /// wrap_shift[(a, k)] is added to component a whenever a difference
    /// stencil wraps once around periodic axis k. Maps of the form
    /// phi = x + (periodic part) set this to the diagonal of axis spans so
    /// that differences across the wrap stay consistent.
    pub wrap_shift: Option<DMatrix<f64>>,
}

impl ConfigurationField {
    pub fn new(n_comp: usize) -> Self {
        Self {
            n_comp,
            levels: Vec::new(),
            wrap_shift: None,
        }
    }

    /// Sets the wrap shift for sections of the form phi = x + periodic.
    pub fn with_identity_wrap(mut self, grid: &SpaceTimeGrid) -> Self {
        let mut w = DMatrix::zeros(self.n_comp, grid.n_space());
        for k in 0..grid.n_space().min(self.n_comp) {
            if grid.boundary[k] == Boundary::Periodic {
                w[(k, k)] = grid.extents[k][1] - grid.extents[k][0];
            }
        }
        self.wrap_shift = Some(w);
        self
    }

    /// Builds one time level by sampling a function of the node coordinates.
    pub fn level_from_fn(
        grid: &SpaceTimeGrid,
        n_comp: usize,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> TimeLevel {
        let mut phi = Vec::with_capacity(grid.n_nodes() * n_comp);
        for flat in 0..grid.n_nodes() {
            let x = grid.node_coords(&grid.node_multi(flat));
            let y = f(&x);
            assert_eq!(y.len(), n_comp);
            phi.extend_from_slice(&y);
        }
        TimeLevel { phi, lambda: None }
    }

    pub fn push_level(&mut self, grid: &SpaceTimeGrid, level: TimeLevel) -> Result<()> {
        if level.phi.len() != grid.n_nodes() * self.n_comp {
            return Err(Error::ShapeError(format!(
                "level has {} values, grid expects {}",
                level.phi.len(),
                grid.n_nodes() * self.n_comp
            )));
        }
        if let Some(l) = &level.lambda {
            if l.len() != grid.n_cells() {
                return Err(Error::ShapeError(format!(
                    "lambda has {} values, grid has {} cells",
                    l.len(),
                    grid.n_cells()
                )));
            }
        }
        self.levels.push(level);
        Ok(())
    }

    pub fn phi_at(&self, grid: &SpaceTimeGrid, level: usize, node_flat: usize) -> DVector<f64> {
        let _ = grid;
        let base = node_flat * self.n_comp;
        DVector::from_column_slice(&self.levels[level].phi[base..base + self.n_comp])
    }

    /// Node-valued multiplier: average of the incident cells.
    pub fn lambda_at_node(
        &self,
        grid: &SpaceTimeGrid,
        level: usize,
        multi: &[usize],
    ) -> Option<f64> {
        let lam = self.levels[level].lambda.as_ref()?;
        let n = grid.n_space();
        let mut sum = 0.0;
        let mut count = 0.0;
        // Cells incident to a node have per-axis index in {i-1, i}.
        for corner in 0..(1usize << n) {
            let mut cell = vec![0usize; n];
            let mut ok = true;
            for k in 0..n {
                let bit = (corner >> k) & 1;
                let raw = multi[k] as isize - bit as isize;
                let c = match grid.boundary[k] {
                    Boundary::Periodic => raw.rem_euclid(grid.cells(k) as isize) as usize,
                    Boundary::Fixed => {
                        if raw < 0 || raw >= grid.cells(k) as isize {
                            ok = false;
                            break;
                        }
                        raw as usize
                    }
                };
                cell[k] = c;
            }
            if ok {
                sum += lam[grid.cell_flat(&cell)];
                count += 1.0;
            }
        }
        Some(sum / count)
    }
}

/// One point of the first jet: base coordinates, fiber value, space-time
/// derivatives, optional multiplier data.
#[derive(Debug, Clone)]
pub struct JetSample {
    /// Spatial base point.
    pub x: Vec<f64>,
    pub t: f64,
    pub y: DVector<f64>,
    /// v[(a, mu)] with column 0 the time derivative, columns 1..=n spatial.
    pub v: DMatrix<f64>,
    pub lambda: Option<f64>,
    /// Multiplier derivatives (beta_0, beta_1, ..., beta_n).
    pub beta: Option<DVector<f64>>,
}

impl JetSample {
    pub fn n_comp(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_space(&self) -> usize {
        self.v.ncols() - 1
    }

    /// Spatial deformation gradient F^a_j (drops the time column).
    pub fn spatial_block(&self) -> DMatrix<f64> {
        self.v.columns(1, self.n_space()).into_owned()
    }

    pub fn time_velocity(&self) -> DVector<f64> {
        self.v.column(0).into_owned()
    }
}

/// True when the spatial block has determinant above the regularity floor.
pub fn regularity_check(sample: &JetSample) -> bool {
    if sample.n_comp() != sample.n_space() {
        return false;
    }
    sample.spatial_block().determinant() > REGULARITY_FLOOR
}

fn component(
    field: &ConfigurationField,
    grid: &SpaceTimeGrid,
    level: usize,
    multi: &[usize],
    a: usize,
) -> f64 {
    field.levels[level].phi[grid.node_flat(multi) * field.n_comp + a]
}

/// Second-order finite-difference derivative of one phi component along a
/// spatial axis: centered in the interior and on periodic axes, one-sided
/// at fixed ends.
fn spatial_derivative(
    field: &ConfigurationField,
    grid: &SpaceTimeGrid,
    level: usize,
    multi: &[usize],
    axis: usize,
    a: usize,
) -> f64 {
    let h = grid.spacing(axis);
    let shift_of = |(m, wrap): (Vec<usize>, isize)| {
        let adj = field
            .wrap_shift
            .as_ref()
            .map_or(0.0, |w| wrap as f64 * w[(a, axis)]);
        component(field, grid, level, &m, a) + adj
    };
    let plus = grid.shift_wrapped(multi, axis, 1);
    let minus = grid.shift_wrapped(multi, axis, -1);
    match (minus, plus) {
        (Some(m), Some(p)) => (shift_of(p) - shift_of(m)) / (2.0 * h),
        (None, Some(_)) => {
            let f0 = component(field, grid, level, multi, a);
            let f1 = component(field, grid, level, &grid.shift(multi, axis, 1).unwrap(), a);
            let f2 = component(field, grid, level, &grid.shift(multi, axis, 2).unwrap(), a);
            (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h)
        }
        (Some(_), None) => {
            let f0 = component(field, grid, level, multi, a);
            let f1 = component(field, grid, level, &grid.shift(multi, axis, -1).unwrap(), a);
            let f2 = component(field, grid, level, &grid.shift(multi, axis, -2).unwrap(), a);
            (3.0 * f0 - 4.0 * f1 + f2) / (2.0 * h)
        }
        (None, None) => unreachable!("axis with fewer than 3 nodes"),
    }
}

fn time_derivative(
    field: &ConfigurationField,
    grid: &SpaceTimeGrid,
    level: usize,
    multi: &[usize],
    a: usize,
) -> Result<f64> {
    let n_levels = field.levels.len();
    if n_levels < 2 {
        return Err(Error::IndexError(
            "time derivative needs at least 2 committed levels".into(),
        ));
    }
    let dt = grid.dt;
    let f = |l: usize| component(field, grid, l, multi, a);
    Ok(if level > 0 && level + 1 < n_levels {
        (f(level + 1) - f(level - 1)) / (2.0 * dt)
    } else if level == 0 {
        if n_levels >= 3 {
            (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * dt)
        } else {
            (f(1) - f(0)) / dt
        }
    } else {
        // level is the last committed one
        if n_levels >= 3 {
            (3.0 * f(level) - 4.0 * f(level - 1) + f(level - 2)) / (2.0 * dt)
        } else {
            (f(level) - f(level - 1)) / dt
        }
    })
}

/// Finite-difference jet of the section at one grid node and time level.
pub fn jet_extend(
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    node: usize,
    level: usize,
) -> Result<JetSample> {
    if level >= field.levels.len() {
        return Err(Error::IndexError(format!(
            "level {level} out of range ({} committed)",
            field.levels.len()
        )));
    }
    if node >= grid.n_nodes() {
        return Err(Error::IndexError(format!(
            "node {node} out of range ({} nodes)",
            grid.n_nodes()
        )));
    }
    let n = grid.n_space();
    let nc = field.n_comp;
    let multi = grid.node_multi(node);
    let y = field.phi_at(grid, level, node);
    let mut v = DMatrix::zeros(nc, n + 1);
    for a in 0..nc {
        v[(a, 0)] = time_derivative(field, grid, level, &multi, a)?;
        for k in 0..n {
            v[(a, k + 1)] = spatial_derivative(field, grid, level, &multi, k, a);
        }
    }
    let lambda = field.lambda_at_node(grid, level, &multi);
    let beta = if field.levels[level].lambda.is_some() {
        Some(multiplier_derivatives(grid, field, level, &multi)?)
    } else {
        None
    };
    Ok(JetSample {
        x: grid.node_coords(&multi),
        t: level as f64 * grid.dt,
        y,
        v,
        lambda,
        beta,
    })
}

fn multiplier_derivatives(
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
    multi: &[usize],
) -> Result<DVector<f64>> {
    let n = grid.n_space();
    let mut beta = DVector::zeros(n + 1);
    let lam = |l: usize, m: &[usize]| field.lambda_at_node(grid, l, m).unwrap_or(0.0);
    // Time component: centered when neighbors carry lambda, otherwise 0.
    let has = |l: usize| {
        l < field.levels.len() && field.levels[l].lambda.is_some()
    };
    if level > 0 && has(level - 1) && has(level + 1) {
        beta[0] = (lam(level + 1, multi) - lam(level - 1, multi)) / (2.0 * grid.dt);
    }
    for k in 0..n {
        let plus = grid.shift(multi, k, 1);
        let minus = grid.shift(multi, k, -1);
        if let (Some(m), Some(p)) = (minus, plus) {
            beta[k + 1] = (lam(level, &p) - lam(level, &m)) / (2.0 * grid.spacing(k));
        }
    }
    Ok(beta)
}

/// Fiber values at the corners of one spatial cell, adjusted for periodic
/// wrap so that corner differences are consistent. Corner order follows
/// `SpaceTimeGrid::cell_corners`.
pub fn cell_corner_values(
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
    cell: &[usize],
) -> Vec<DVector<f64>> {
    let n = grid.n_space();
    let nc = field.n_comp;
    (0..(1usize << n))
        .map(|corner| {
            let mut multi = vec![0usize; n];
            let mut adjust = DVector::zeros(nc);
            for k in 0..n {
                let bit = (corner >> (n - 1 - k)) & 1;
                let raw = cell[k] + bit;
                if raw >= grid.nodes[k] {
                    // Wrapped once around a periodic axis.
                    multi[k] = raw - grid.nodes[k];
                    if let Some(w) = &field.wrap_shift {
                        for a in 0..nc {
                            adjust[a] += w[(a, k)];
                        }
                    }
                } else {
                    multi[k] = raw;
                }
            }
            field.phi_at(grid, level, grid.node_flat(&multi)) + adjust
        })
        .collect()
}

/// Deformation gradient of a cell from its corner values: the average of
/// the first differences along each axis.
pub fn cell_gradient(
    grid: &SpaceTimeGrid,
    corners: &[DVector<f64>],
    n_comp: usize,
) -> DMatrix<f64> {
    let n = grid.n_space();
    let mut f = DMatrix::zeros(n_comp, n);
    let pairs = 1usize << (n - 1);
    for k in 0..n {
        let h = grid.spacing(k);
        // Corners with bit k set minus corners with bit k clear.
        for corner in 0..(1usize << n) {
            let bit = (corner >> (n - 1 - k)) & 1;
            let sign = if bit == 1 { 1.0 } else { -1.0 };
            for a in 0..n_comp {
                f[(a, k)] += sign * corners[corner][a] / (pairs as f64 * h);
            }
        }
    }
    f
}

/// Average of the corner values (fiber value at the cell center).
pub fn cell_average(corners: &[DVector<f64>], n_comp: usize) -> DVector<f64> {
    let mut y = DVector::zeros(n_comp);
    for c in corners {
        y += c;
    }
    y / corners.len() as f64
}

/// Cell-centered jet at one time level: F from corner differences, fiber
/// value from the corner average, time velocity by a centered difference of
/// the corner averages when neighbor levels exist (zero otherwise).
pub fn cell_jet(
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
    cell_flat: usize,
) -> Result<JetSample> {
    if level >= field.levels.len() {
        return Err(Error::IndexError(format!(
            "level {level} out of range ({} committed)",
            field.levels.len()
        )));
    }
    let cell = grid.cell_multi(cell_flat);
    let nc = field.n_comp;
    let corners = cell_corner_values(grid, field, level, &cell);
    let f = cell_gradient(grid, &corners, nc);
    let y = cell_average(&corners, nc);
    let n = grid.n_space();
    let mut v = DMatrix::zeros(nc, n + 1);
    v.columns_mut(1, n).copy_from(&f);
    if level > 0 && level + 1 < field.levels.len() {
        let prev = cell_average(&cell_corner_values(grid, field, level - 1, &cell), nc);
        let next = cell_average(&cell_corner_values(grid, field, level + 1, &cell), nc);
        v.column_mut(0).copy_from(&((next - prev) / (2.0 * grid.dt)));
    }
    let lambda = field.levels[level]
        .lambda
        .as_ref()
        .map(|lam| lam[cell_flat]);
    Ok(JetSample {
        x: grid.cell_center(&cell),
        t: level as f64 * grid.dt,
        y,
        v,
        lambda,
        beta: None,
    })
}

/// Writes one time level as CSV: coordinates, phi components, node lambda.
pub fn write_level_csv<W: std::io::Write>(
    out: &mut W,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> Result<()> {
    let n = grid.n_space();
    let nc = field.n_comp;
    let has_lambda = field.levels[level].lambda.is_some();
    let mut header: Vec<String> = (0..n).map(|k| format!("x{k}")).collect();
    header.extend((0..nc).map(|a| format!("phi{a}")));
    if has_lambda {
        header.push("lambda".into());
    }
    writeln!(out, "{}", header.join(","))?;
    for flat in 0..grid.n_nodes() {
        let multi = grid.node_multi(flat);
        let mut row: Vec<String> = grid
            .node_coords(&multi)
            .iter()
            .map(|v| format!("{v:.17e}"))
            .collect();
        let y = field.phi_at(grid, level, flat);
        row.extend(y.iter().map(|v| format!("{v:.17e}")));
        if has_lambda {
            let l = field.lambda_at_node(grid, level, &multi).unwrap();
            row.push(format!("{l:.17e}"));
        }
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn periodic_1d(nodes: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::new(
            vec![[0.0, std::f64::consts::TAU]],
            vec![nodes],
            0.01,
            vec![Boundary::Periodic],
        )
        .unwrap()
    }

    #[test]
    fn identity_map_jet_is_exact() {
        let grid = SpaceTimeGrid::new(
            vec![[0.0, 1.0], [0.0, 1.0]],
            vec![8, 8],
            0.1,
            vec![Boundary::Periodic, Boundary::Fixed],
        )
        .unwrap();
        let mut field = ConfigurationField::new(2).with_identity_wrap(&grid);
        let level = ConfigurationField::level_from_fn(&grid, 2, |x| x.to_vec());
        field.push_level(&grid, level.clone()).unwrap();
        field.push_level(&grid, level).unwrap();
        for node in [0, 10, 37, grid.n_nodes() - 1] {
            let jet = jet_extend(&grid, &field, node, 1).unwrap();
            let f = jet.spatial_block();
            assert_relative_eq!((f - DMatrix::identity(2, 2)).amax(), 0.0, epsilon = 1e-13);
            assert_relative_eq!(jet.time_velocity().amax(), 0.0, epsilon = 1e-13);
            assert!(regularity_check(&jet));
        }
    }

    #[test]
    fn uniform_flow_jet_is_exact() {
        let grid = periodic_1d(16);
        let u0 = 0.7;
        let mut field = ConfigurationField::new(1).with_identity_wrap(&grid);
        for level in 0..3 {
            let t = level as f64 * grid.dt;
            // Displacement form keeps the field periodic-compatible.
            let l = ConfigurationField::level_from_fn(&grid, 1, |x| vec![x[0] + t * u0]);
            field.push_level(&grid, l).unwrap();
        }
        for level in 0..3 {
            let jet = jet_extend(&grid, &field, 5, level).unwrap();
            assert_relative_eq!(jet.v[(0, 0)], u0, max_relative = 1e-12);
            assert_relative_eq!(jet.v[(0, 1)], 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn sine_field_derivative_accuracy() {
        let grid = periodic_1d(64);
        let mut field = ConfigurationField::new(1);
        let l = ConfigurationField::level_from_fn(&grid, 1, |x| vec![x[0].sin()]);
        field.push_level(&grid, l.clone()).unwrap();
        field.push_level(&grid, l).unwrap();
        let jet = jet_extend(&grid, &field, 0, 0).unwrap();
        // d/dx sin at x=0 is 1; centered error is h^2/6 with h = 2pi/64.
        assert!((jet.v[(0, 1)] - 1.0).abs() < 2e-3);
    }

    #[test]
    fn jet_second_order_convergence() {
        let mut errs = Vec::new();
        for nodes in [16, 32, 64] {
            let grid = periodic_1d(nodes);
            let mut field = ConfigurationField::new(1);
            for level in 0..3 {
                let t = level as f64 * grid.dt;
                let l = ConfigurationField::level_from_fn(&grid, 1, |x| {
                    vec![(x[0] + 0.3 * t).sin()]
                });
                field.push_level(&grid, l).unwrap();
            }
            let mut worst: f64 = 0.0;
            for node in 0..grid.n_nodes() {
                let jet = jet_extend(&grid, &field, node, 1).unwrap();
                let x = jet.x[0];
                let t = grid.dt;
                let exact = (x + 0.3 * t).cos();
                worst = worst.max((jet.v[(0, 1)] - exact).abs());
            }
            errs.push(worst);
        }
        let order = (errs[0] / errs[1]).log2().min((errs[1] / errs[2]).log2());
        assert!(order > 1.9, "spatial order {order:.2}, errors {errs:?}");
    }

    #[test]
    fn one_sided_boundary_is_second_order_on_quadratics() {
        let grid = SpaceTimeGrid::new(
            vec![[0.0, 1.0]],
            vec![9],
            0.1,
            vec![Boundary::Fixed],
        )
        .unwrap();
        let mut field = ConfigurationField::new(1);
        let l = ConfigurationField::level_from_fn(&grid, 1, |x| vec![x[0] * x[0]]);
        field.push_level(&grid, l.clone()).unwrap();
        field.push_level(&grid, l).unwrap();
        // One-sided 2nd-order stencils are exact on quadratics.
        let left = jet_extend(&grid, &field, 0, 0).unwrap();
        assert_relative_eq!(left.v[(0, 1)], 0.0, epsilon = 1e-13);
        let right = jet_extend(&grid, &field, 8, 0).unwrap();
        assert_relative_eq!(right.v[(0, 1)], 2.0, max_relative = 1e-13);
    }

    #[test]
    fn regularity_cases() {
        let mk = |f: DMatrix<f64>| JetSample {
            x: vec![0.0; f.ncols()],
            t: 0.0,
            y: DVector::zeros(f.nrows()),
            v: {
                let mut v = DMatrix::zeros(f.nrows(), f.ncols() + 1);
                v.columns_mut(1, f.ncols()).copy_from(&f);
                v
            },
            lambda: None,
            beta: None,
        };
        assert!(regularity_check(&mk(DMatrix::identity(2, 2))));
        assert!(!regularity_check(&mk(DMatrix::zeros(2, 2))));
        assert!(!regularity_check(&mk(DMatrix::from_diagonal(
            &DVector::from_vec(vec![1e-12, 1.0])
        ))));
    }

    #[test]
    fn lambda_node_average_and_beta() {
        let grid = periodic_1d(8);
        let mut field = ConfigurationField::new(1);
        let mut level = ConfigurationField::level_from_fn(&grid, 1, |x| vec![x[0]]);
        // lambda linear in the cell index; periodic wrap makes the last
        // node's neighbors see the jump, so check an interior node.
        level.lambda = Some((0..grid.n_cells()).map(|c| c as f64).collect());
        field.push_level(&grid, level.clone()).unwrap();
        field.push_level(&grid, level).unwrap();
        let jet = jet_extend(&grid, &field, 3, 0).unwrap();
        // Node 3 sits between cells 2 and 3.
        assert_relative_eq!(jet.lambda.unwrap(), 2.5);
        let beta = jet.beta.unwrap();
        assert_relative_eq!(beta[1], 1.0 / grid.spacing(0), max_relative = 1e-12);
    }

    #[test]
    fn csv_snapshot_format() {
        let grid = periodic_1d(4);
        let mut field = ConfigurationField::new(1);
        let l = ConfigurationField::level_from_fn(&grid, 1, |x| vec![2.0 * x[0]]);
        field.push_level(&grid, l).unwrap();
        let mut buf = Vec::new();
        write_level_csv(&mut buf, &grid, &field, 0).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x0,phi0");
        assert_eq!(lines.len(), 1 + grid.n_nodes());
        let first: Vec<f64> = lines[1]
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(first, vec![0.0, 0.0]);
    }
}
