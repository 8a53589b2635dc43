//! Riemannian metrics on coordinate charts: evaluation, first derivatives,
//! Christoffel symbols, determinants and inverses.
//!
//! One chart per run; there are no atlases or chart transitions. Charts are
//! treated as dimensionless, physical units live in the density and the
//! stored energy.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition-number cap past which a metric is reported as singular.
pub const CONDITION_CAP: f64 = 1e12;

/// Polar charts exclude a disc around the coordinate singularity at r = 0.
pub const POLAR_R_MIN: f64 = 1e-3;

type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradientField = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Analytic or tabulated metric kinds.
#[derive(Clone)]
pub enum MetricKind {
    /// Identity matrix at every point.
    Euclidean,
    /// Conformal metric c(x)^2 * delta with a smooth positive factor c.
    Conformal { c: ScalarField, grad_c: GradientField },
    /// 2D polar chart (r, theta) with metric diag(1, r^2).
    Polar,
    /// Tabulated metric loaded from a structured text file; derivatives by
    /// 4th-order central differences of the interpolant.
    UserTable(MetricTable),
}

impl fmt::Debug for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::Euclidean => write!(f, "Euclidean"),
            MetricKind::Conformal { .. } => write!(f, "Conformal"),
            MetricKind::Polar => write!(f, "Polar"),
            MetricKind::UserTable(_) => write!(f, "UserTable"),
        }
    }
}

/// A smooth symmetric positive-definite metric on a coordinate chart.
#[derive(Debug, Clone)]
pub struct MetricField {
    dim: usize,
    kind: MetricKind,
}

/// Christoffel symbols of the second kind, gamma[c][(a, b)], symmetric in
/// the lower pair (a, b).
#[derive(Debug, Clone)]
pub struct ChristoffelValue {
    pub gamma: Vec<DMatrix<f64>>,
}

impl ChristoffelValue {
    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn is_zero(&self, tol: f64) -> bool {
        self.gamma.iter().all(|m| m.amax() <= tol)
    }
}

impl MetricField {
    pub fn euclidean(dim: usize) -> Self {
        Self {
            dim,
            kind: MetricKind::Euclidean,
        }
    }

    /// Conformal metric c(x)^2 * delta with constant factor c.
    pub fn conformal_const(dim: usize, c: f64) -> Self {
        Self::conformal(
            dim,
            Arc::new(move |_: &[f64]| c),
            Arc::new(move |x: &[f64]| vec![0.0; x.len()]),
        )
    }

    pub fn conformal(dim: usize, c: ScalarField, grad_c: GradientField) -> Self {
        Self {
            dim,
            kind: MetricKind::Conformal { c, grad_c },
        }
    }

    pub fn polar() -> Self {
        Self {
            dim: 2,
            kind: MetricKind::Polar,
        }
    }

    pub fn user_table(table: MetricTable) -> Self {
        Self {
            dim: table.dim,
            kind: MetricKind::UserTable(table),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &MetricKind {
        &self.kind
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.kind, MetricKind::Euclidean)
    }

    fn check_domain(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::ShapeError(format!(
                "point has dimension {}, metric has dimension {}",
                x.len(),
                self.dim
            )));
        }
        match &self.kind {
            MetricKind::Polar if x[0] < POLAR_R_MIN => Err(Error::DomainError {
                point: x.to_vec(),
                reason: format!("polar chart requires r >= {POLAR_R_MIN}"),
            }),
            MetricKind::UserTable(t) => t.check_domain(x),
            _ => Ok(()),
        }
    }

    /// Metric matrix M_ij(x); symmetric positive definite on the chart.
    pub fn eval(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_domain(x)?;
        let n = self.dim;
        Ok(match &self.kind {
            MetricKind::Euclidean => DMatrix::identity(n, n),
            MetricKind::Conformal { c, .. } => {
                let cc = c(x);
                DMatrix::identity(n, n) * (cc * cc)
            }
            MetricKind::Polar => {
                let mut m = DMatrix::identity(2, 2);
                m[(1, 1)] = x[0] * x[0];
                m
            }
            MetricKind::UserTable(t) => t.interpolate(x)?,
        })
    }

    /// First derivatives d[k] = \partial_k M_ij(x).
    pub fn deriv(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.check_domain(x)?;
        let n = self.dim;
        Ok(match &self.kind {
            MetricKind::Euclidean => vec![DMatrix::zeros(n, n); n],
            MetricKind::Conformal { c, grad_c } => {
                let cc = c(x);
                let g = grad_c(x);
                (0..n)
                    .map(|k| DMatrix::identity(n, n) * (2.0 * cc * g[k]))
                    .collect()
            }
            MetricKind::Polar => {
                let mut dr = DMatrix::zeros(2, 2);
                dr[(1, 1)] = 2.0 * x[0];
                vec![dr, DMatrix::zeros(2, 2)]
            }
            MetricKind::UserTable(t) => t.finite_difference_deriv(x)?,
        })
    }

    /// Inverse metric, guarded by the condition-number cap.
    pub fn inverse(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.eval(x)?;
        let svd = m.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !cond.is_finite() || cond > CONDITION_CAP {
            return Err(Error::SingularMetric {
                point: x.to_vec(),
                cond,
                cap: CONDITION_CAP,
            });
        }
        m.try_inverse().ok_or_else(|| Error::SingularMetric {
            point: x.to_vec(),
            cond,
            cap: CONDITION_CAP,
        })
    }

    /// sqrt(det M(x)).
    pub fn det_sqrt(&self, x: &[f64]) -> Result<f64> {
        // Cheap exits for the analytic kinds that dominate the hot loops.
        match &self.kind {
            MetricKind::Euclidean => {
                self.check_domain(x)?;
                return Ok(1.0);
            }
            MetricKind::Polar => {
                self.check_domain(x)?;
                return Ok(x[0]);
            }
            _ => {}
        }
        let m = self.eval(x)?;
        let det = m.determinant();
        if det <= 0.0 {
            return Err(Error::SingularMetric {
                point: x.to_vec(),
                cond: f64::INFINITY,
                cap: CONDITION_CAP,
            });
        }
        Ok(det.sqrt())
    }

    /// Christoffel symbols of the second kind,
    /// gamma^c_ab = 1/2 g^cd (d_b g_ad + d_a g_bd - d_d g_ab).
    pub fn christoffel(&self, x: &[f64]) -> Result<ChristoffelValue> {
        let n = self.dim;
        if self.is_flat() {
            self.check_domain(x)?;
            return Ok(ChristoffelValue {
                gamma: vec![DMatrix::zeros(n, n); n],
            });
        }
        let inv = self.inverse(x)?;
        let dg = self.deriv(x)?;
        let mut gamma = vec![DMatrix::zeros(n, n); n];
        for c in 0..n {
            for a in 0..n {
                for b in a..n {
                    let mut s = 0.0;
                    for d in 0..n {
                        s += inv[(c, d)] * (dg[b][(a, d)] + dg[a][(b, d)] - dg[d][(a, b)]);
                    }
                    let v = 0.5 * s;
                    gamma[c][(a, b)] = v;
                    gamma[c][(b, a)] = v;
                }
            }
        }
        Ok(ChristoffelValue { gamma })
    }

    /// Covariant time derivative of a curve velocity:
    /// yddot^b + gamma^b_ac(y) ydot^a ydot^c.
    pub fn covariant_accel(
        &self,
        y: &[f64],
        ydot: &DVector<f64>,
        yddot: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let n = self.dim;
        if ydot.len() != n || yddot.len() != n {
            return Err(Error::ShapeError(format!(
                "covariant_accel expects vectors of dimension {n}"
            )));
        }
        if self.is_flat() {
            return Ok(yddot.clone());
        }
        let chr = self.christoffel(y)?;
        let mut out = yddot.clone();
        for b in 0..n {
            let mut q = 0.0;
            for a in 0..n {
                for c in 0..n {
                    q += chr.gamma[b][(a, c)] * ydot[a] * ydot[c];
                }
            }
            out[b] += q;
        }
        Ok(out)
    }
}

/// Tabulated metric on a rectilinear grid, multilinear interpolation.
#[derive(Debug, Clone)]
pub struct MetricTable {
    pub dim: usize,
    pub axes: Vec<TableAxis>,
    /// Node-major (axis 0 slowest), dim*dim components row-major per node.
    pub data: Vec<f64>,
    /// Absolute finite-difference step used for derivatives.
    pub fd_step: f64,
}

#[derive(Debug, Clone)]
pub struct TableAxis {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl TableAxis {
    fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.nodes as f64 - 1.0)
    }
}

impl MetricTable {
    fn check_domain(&self, x: &[f64]) -> Result<()> {
        for (k, ax) in self.axes.iter().enumerate() {
            let tol = 1e-12 * (ax.max - ax.min).abs();
            if x[k] < ax.min - tol || x[k] > ax.max + tol {
                return Err(Error::DomainError {
                    point: x.to_vec(),
                    reason: format!("axis {k} outside table range [{}, {}]", ax.min, ax.max),
                });
            }
        }
        Ok(())
    }

    fn interpolate(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let d = self.dim;
        // Per-axis cell index and local weight.
        let mut idx = vec![0usize; d];
        let mut w = vec![0.0f64; d];
        for k in 0..d {
            let ax = &self.axes[k];
            let h = ax.spacing();
            let t = ((x[k] - ax.min) / h).clamp(0.0, (ax.nodes - 1) as f64);
            let i = (t.floor() as usize).min(ax.nodes - 2);
            idx[k] = i;
            w[k] = t - i as f64;
        }
        let comps = d * d;
        let mut out = vec![0.0f64; comps];
        // Sum over the 2^d cell corners.
        for corner in 0..(1usize << d) {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for k in 0..d {
                let bit = (corner >> k) & 1;
                weight *= if bit == 1 { w[k] } else { 1.0 - w[k] };
                flat = flat * self.axes[k].nodes + (idx[k] + bit);
            }
            let base = flat * comps;
            for c in 0..comps {
                out[c] += weight * self.data[base + c];
            }
        }
        let m = DMatrix::from_row_slice(d, d, &out);
        // Symmetrize against entry noise in the table.
        Ok(0.5 * (&m + m.transpose()))
    }

    fn finite_difference_deriv(&self, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        let d = self.dim;
        let h = self.fd_step;
        let mut out = Vec::with_capacity(d);
        for k in 0..d {
            let ax = &self.axes[k];
            // Keep the 5-point stencil inside the table.
            let xc = x[k].clamp(ax.min + 2.0 * h, ax.max - 2.0 * h);
            let mut p = x.to_vec();
            let sample = |off: f64, p: &mut Vec<f64>| -> Result<DMatrix<f64>> {
                p[k] = xc + off;
                self.interpolate(p)
            };
            let f_m2 = sample(-2.0 * h, &mut p)?;
            let f_m1 = sample(-h, &mut p)?;
            let f_p1 = sample(h, &mut p)?;
            let f_p2 = sample(2.0 * h, &mut p)?;
            out.push((f_m2 - f_p2 + 8.0 * (f_p1 - f_m1)) / (12.0 * h));
        }
        Ok(out)
    }

    /// Parses the structured text format documented in the README:
    /// comment lines start with '#', then `dim D`, one `axis MIN MAX NODES`
    /// line per dimension, an optional `fd_step H`, and one line of D*D
    /// row-major metric components per node (axis 0 slowest).
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut axes = Vec::new();
        let mut fd_step = None;
        let mut data = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            let err = |msg: &str| Error::Parse(format!("line {}: {}", lineno + 1, msg));
            match head {
                "dim" => {
                    let v: usize = parts
                        .next()
                        .ok_or_else(|| err("missing dim value"))?
                        .parse()
                        .map_err(|_| err("bad dim value"))?;
                    dim = Some(v);
                }
                "axis" => {
                    let vals: Vec<f64> = parts
                        .map(|p| p.parse().map_err(|_| err("bad axis value")))
                        .collect::<Result<_>>()?;
                    if vals.len() != 3 {
                        return Err(err("axis needs MIN MAX NODES"));
                    }
                    axes.push(TableAxis {
                        min: vals[0],
                        max: vals[1],
                        nodes: vals[2] as usize,
                    });
                }
                "fd_step" => {
                    let v: f64 = parts
                        .next()
                        .ok_or_else(|| err("missing fd_step value"))?
                        .parse()
                        .map_err(|_| err("bad fd_step value"))?;
                    fd_step = Some(v);
                }
                _ => {
                    for tok in line.split_whitespace() {
                        data.push(tok.parse::<f64>().map_err(|_| err("bad data value"))?);
                    }
                }
            }
        }
        let dim = dim.ok_or_else(|| Error::Parse("missing dim line".into()))?;
        if axes.len() != dim {
            return Err(Error::Parse(format!(
                "expected {dim} axis lines, found {}",
                axes.len()
            )));
        }
        for ax in &axes {
            if ax.nodes < 2 || !(ax.max > ax.min) {
                return Err(Error::Parse("degenerate axis".into()));
            }
        }
        let n_nodes: usize = axes.iter().map(|a| a.nodes).product();
        if data.len() != n_nodes * dim * dim {
            return Err(Error::Parse(format!(
                "expected {} data values, found {}",
                n_nodes * dim * dim,
                data.len()
            )));
        }
        let scale = axes
            .iter()
            .map(|a| a.max - a.min)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            dim,
            axes,
            data,
            fd_step: fd_step.unwrap_or(1e-5 * scale),
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }
}
