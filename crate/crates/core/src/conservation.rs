//! Symmetry generators, covariant momentum maps, Noether currents and the
//! associated discrete divergence and energy-continuity diagnostics.
//!
//! The generic momentum map is computed by contracting the prolonged
//! generator with the Cartan form through a small exterior-algebra engine
//! and pulling back along the jet; the closed-form currents are coded
//! separately from their final formulas, so the two paths are independent
//! and are cross-checked to tight tolerances.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::exec;
use crate::fields::{jet_extend, ConfigurationField, JetSample, SpaceTimeGrid};
use crate::material::MaterialModel;

/// Minimal exterior algebra over a finite set of coordinate differentials,
/// enough to express the Cartan form, contract it with a vector field and
/// pull the result back along a jet.
pub mod forms {
    use std::collections::BTreeMap;

    /// A differential form as a sum of wedge monomials. The key is a bit
    /// mask of participating differentials (ascending variable order), the
    /// value the coefficient.
    #[derive(Debug, Clone, PartialEq)]
    pub struct Form {
        pub n_vars: usize,
        pub terms: BTreeMap<u64, f64>,
    }

    fn mask_to_vars(mask: u64) -> Vec<usize> {
        (0..64).filter(|i| mask >> i & 1 == 1).collect()
    }

    /// Sorts a variable list, returning the permutation sign, or None when
    /// a variable repeats (null wedge).
    fn sort_sign(vars: &mut Vec<usize>) -> Option<f64> {
        let mut sign = 1.0;
        // Bubble sort; swap count parity gives the sign.
        for i in 0..vars.len() {
            for j in 0..vars.len().saturating_sub(1 + i) {
                if vars[j] > vars[j + 1] {
                    vars.swap(j, j + 1);
                    sign = -sign;
                }
            }
        }
        if vars.windows(2).any(|w| w[0] == w[1]) {
            return None;
        }
        Some(sign)
    }

    impl Form {
        pub fn zero(n_vars: usize) -> Self {
            Self {
                n_vars,
                terms: BTreeMap::new(),
            }
        }

        /// dz^{vars[0]} wedge ... scaled by `coeff`; the list need not be
        /// sorted.
        pub fn term(n_vars: usize, vars: &[usize], coeff: f64) -> Self {
            let mut out = Self::zero(n_vars);
            out.add_term(vars, coeff);
            out
        }

        pub fn add_term(&mut self, vars: &[usize], coeff: f64) {
            let mut v = vars.to_vec();
            if let Some(sign) = sort_sign(&mut v) {
                let mask = v.iter().fold(0u64, |m, i| m | 1 << i);
                let entry = self.terms.entry(mask).or_insert(0.0);
                *entry += sign * coeff;
                if *entry == 0.0 {
                    self.terms.remove(&mask);
                }
            }
        }

        pub fn add_scaled(&mut self, other: &Form, scale: f64) {
            for (&mask, &c) in &other.terms {
                let entry = self.terms.entry(mask).or_insert(0.0);
                *entry += scale * c;
                if *entry == 0.0 {
                    self.terms.remove(&mask);
                }
            }
        }

        /// Interior product with the vector sum_i components[i] d/dz^i.
        pub fn contract(&self, components: &[f64]) -> Form {
            let mut out = Form::zero(self.n_vars);
            for (&mask, &coeff) in &self.terms {
                let vars = mask_to_vars(mask);
                for (pos, &i) in vars.iter().enumerate() {
                    if components[i] == 0.0 {
                        continue;
                    }
                    let sign = if pos % 2 == 0 { 1.0 } else { -1.0 };
                    let rest: Vec<usize> =
                        vars.iter().copied().filter(|&v| v != i).collect();
                    out.add_term(&rest, sign * components[i] * coeff);
                }
            }
            out
        }

        /// Substitutes dz^var by sum_j replacement[j].1 dz^{replacement[j].0}
        /// in every monomial.
        pub fn substitute(&self, var: usize, replacement: &[(usize, f64)]) -> Form {
            let mut out = Form::zero(self.n_vars);
            for (&mask, &coeff) in &self.terms {
                let vars = mask_to_vars(mask);
                if mask >> var & 1 == 0 {
                    out.add_term(&vars, coeff);
                    continue;
                }
                for &(w, c) in replacement {
                    if c == 0.0 {
                        continue;
                    }
                    let subst: Vec<usize> = vars
                        .iter()
                        .map(|&v| if v == var { w } else { v })
                        .collect();
                    out.add_term(&subst, c * coeff);
                }
            }
            out
        }

        /// Coefficient of the sorted monomial over `vars`.
        pub fn coefficient(&self, vars: &[usize]) -> f64 {
            let mut v = vars.to_vec();
            match sort_sign(&mut v) {
                Some(sign) => {
                    let mask = v.iter().fold(0u64, |m, i| m | 1 << i);
                    sign * self.terms.get(&mask).copied().unwrap_or(0.0)
                }
                None => 0.0,
            }
        }
    }

    #[cfg(test)]
    mod tests {
        use super::*;

        #[test]
        fn wedge_antisymmetry_and_contraction() {
            // dz0 ^ dz1 contracted with d/dz1 gives -dz0.
            let f = Form::term(3, &[0, 1], 1.0);
            let c = f.contract(&[0.0, 1.0, 0.0]);
            assert_eq!(c.coefficient(&[0]), -1.0);
            // Reordering flips the sign.
            let g = Form::term(3, &[1, 0], 1.0);
            assert_eq!(g.coefficient(&[0, 1]), -1.0);
            // Repeated variables vanish.
            let h = Form::term(3, &[1, 1], 2.0);
            assert!(h.terms.is_empty());
        }

        #[test]
        fn substitution_expands() {
            // dz2 -> dz0 + 2 dz1 inside dz0 ^ dz2.
            let f = Form::term(3, &[0, 2], 1.0);
            let s = f.substitute(2, &[(0, 1.0), (1, 2.0)]);
            // dz0 ^ dz0 drops, dz0 ^ dz1 carries the factor 2.
            assert_eq!(s.coefficient(&[0, 1]), 2.0);
        }
    }
}

type VectorFieldFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type JacobianFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// Infinitesimal symmetry of the action.
#[derive(Clone)]
pub enum SymmetryGenerator {
    /// Particle relabeling along a divergence-free spatial vector field
    /// xi(x) with Jacobian dxi[(m, j)] = d xi^m / d x^j.
    Relabeling { xi: VectorFieldFn, dxi: JacobianFn },
    /// Time translation scaled by zeta.
    TimeTranslation { zeta: f64 },
    /// Constant fiber shift phi -> phi + c; exact discrete symmetry of
    /// translation-invariant Lagrangians on periodic flat grids.
    FiberTranslation { c: DVector<f64> },
}

impl std::fmt::Debug for SymmetryGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SymmetryGenerator::Relabeling { .. } => write!(f, "Relabeling"),
            SymmetryGenerator::TimeTranslation { zeta } => {
                write!(f, "TimeTranslation({zeta})")
            }
            SymmetryGenerator::FiberTranslation { c } => {
                write!(f, "FiberTranslation({c:?})")
            }
        }
    }
}

impl SymmetryGenerator {
    /// 2D solenoidal field from a stream function:
    /// xi = (-dpsi/dx2, dpsi/dx1). `grad_psi` and `hess_psi` supply the
    /// first and second derivatives of psi.
    pub fn from_stream_function(
        grad_psi: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
        hess_psi: Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
    ) -> Self {
        let g = grad_psi.clone();
        let xi: VectorFieldFn = Arc::new(move |x: &[f64]| {
            let gp = g(x);
            vec![-gp[1], gp[0]]
        });
        let dxi: JacobianFn = Arc::new(move |x: &[f64]| {
            let h = hess_psi(x);
            DMatrix::from_row_slice(2, 2, &[-h[(1, 0)], -h[(1, 1)], h[(0, 0)], h[(0, 1)]])
        });
        SymmetryGenerator::Relabeling { xi, dxi }
    }

    pub fn constant_relabeling(xi0: Vec<f64>) -> Self {
        let n = xi0.len();
        SymmetryGenerator::Relabeling {
            xi: Arc::new(move |_| xi0.clone()),
            dxi: Arc::new(move |_| DMatrix::zeros(n, n)),
        }
    }
}

/// Components of a prolonged generator at one jet point, in the coordinate
/// order (x^0..x^n; y^1..y^N; v^a_mu; beta_mu).
#[derive(Debug, Clone)]
pub struct ProlongedGenerator {
    /// Base components, index 0 is time.
    pub xi_base: DVector<f64>,
    /// Fiber components.
    pub eta_fiber: DVector<f64>,
    /// Jet-coordinate corrections, same layout as JetSample::v.
    pub v_correction: DMatrix<f64>,
    /// Multiplier-slot corrections (beta_mu), zero unless the sample
    /// carries multiplier derivatives.
    pub beta_correction: DVector<f64>,
}

/// First-jet prolongation of a generator at a sample.
pub fn prolong_generator(
    gen: &SymmetryGenerator,
    sample: &JetSample,
) -> Result<ProlongedGenerator> {
    let n = sample.n_space();
    let nc = sample.n_comp();
    let mut out = ProlongedGenerator {
        xi_base: DVector::zeros(n + 1),
        eta_fiber: DVector::zeros(nc),
        v_correction: DMatrix::zeros(nc, n + 1),
        beta_correction: DVector::zeros(n + 1),
    };
    match gen {
        SymmetryGenerator::Relabeling { xi, dxi } => {
            let xv = xi(&sample.x);
            if xv.len() != n {
                return Err(Error::ShapeError(format!(
                    "relabeling field has {} components, base has {n}",
                    xv.len()
                )));
            }
            let d = dxi(&sample.x);
            for k in 0..n {
                out.xi_base[k + 1] = xv[k];
            }
            // v'^a_j picks up -v^a_m d xi^m / d x^j; the time slot is
            // untouched because xi does not depend on t.
            for a in 0..nc {
                for j in 0..n {
                    let mut s = 0.0;
                    for m in 0..n {
                        s += sample.v[(a, m + 1)] * d[(m, j)];
                    }
                    out.v_correction[(a, j + 1)] = -s;
                }
            }
            if let Some(beta) = &sample.beta {
                for j in 0..n {
                    let mut s = 0.0;
                    for m in 0..n {
                        s += beta[m + 1] * d[(m, j)];
                    }
                    out.beta_correction[j + 1] = -s;
                }
            }
        }
        SymmetryGenerator::TimeTranslation { zeta } => {
            out.xi_base[0] = *zeta;
        }
        SymmetryGenerator::FiberTranslation { c } => {
            if c.len() != nc {
                return Err(Error::ShapeError(format!(
                    "fiber shift has {} components, fiber has {nc}",
                    c.len()
                )));
            }
            out.eta_fiber = c.clone();
        }
    }
    Ok(out)
}

/// Noether current components (density J0, flux Jk) at grid nodes.
#[derive(Debug, Clone)]
pub struct NoetherCurrent {
    pub j0: Vec<Option<f64>>,
    pub jk: Vec<Option<DVector<f64>>>,
}

/// Generic momentum map at one sample: the prolonged generator is
/// contracted with the Cartan form and the result pulled back along the
/// jet, yielding the (n+1) current components (J^0, J^k).
pub fn momentum_map(
    model: &MaterialModel,
    sample: &JetSample,
    gen: &SymmetryGenerator,
) -> Result<DVector<f64>> {
    let n = sample.n_space();
    let nc = sample.n_comp();
    let momenta = model.cartan_coefficients(sample)?;
    let prolonged = prolong_generator(gen, sample)?;

    // Variables 0..=n are dx^mu, n+1..n+nc are dy^a.
    let n_vars = n + 1 + nc;
    let all_x: Vec<usize> = (0..=n).collect();
    let mut theta = forms::Form::zero(n_vars);
    // p_a^mu dy^a wedge dnx_mu with dnx_mu = contraction of d^{n+1}x.
    let full = forms::Form::term(n_vars, &all_x, 1.0);
    for mu in 0..=n {
        let mut e_mu = vec![0.0; n_vars];
        e_mu[mu] = 1.0;
        let dnx_mu = full.contract(&e_mu);
        for a in 0..nc {
            let p = if mu == 0 {
                momenta.p0[a]
            } else {
                momenta.pj[(a, mu - 1)]
            };
            let dy = forms::Form::term(n_vars, &[n + 1 + a], 1.0);
            // dy^a wedge dnx_mu.
            for (&mask, &c) in &dnx_mu.terms {
                let mut vars: Vec<usize> = (0..64).filter(|i| mask >> i & 1 == 1).collect();
                vars.insert(0, n + 1 + a);
                theta.add_term(&vars, p * c * dy.coefficient(&[n + 1 + a]));
            }
        }
    }
    theta.add_scaled(&forms::Form::term(n_vars, &all_x, momenta.pi), 1.0);

    // Contract with the generator (base and fiber components; the jet
    // corrections pair with dv slots, which do not occur in the Cartan
    // form written in this basis).
    let mut vector = vec![0.0; n_vars];
    for mu in 0..=n {
        vector[mu] = prolonged.xi_base[mu];
    }
    for a in 0..nc {
        vector[n + 1 + a] = prolonged.eta_fiber[a];
    }
    let mut pulled = theta.contract(&vector);

    // Pull back along the jet: dy^a -> v^a_mu dx^mu.
    for a in 0..nc {
        let repl: Vec<(usize, f64)> = (0..=n).map(|mu| (mu, sample.v[(a, mu)])).collect();
        pulled = pulled.substitute(n + 1 + a, &repl);
    }

    // J^mu is the coefficient of dnx_mu = (-1)^mu dx^0 ^ ... (omit mu) ...
    let mut j = DVector::zeros(n + 1);
    for mu in 0..=n {
        let rest: Vec<usize> = (0..=n).filter(|&v| v != mu).collect();
        let sign = if mu % 2 == 0 { 1.0 } else { -1.0 };
        j[mu] = sign * pulled.coefficient(&rest);
    }
    Ok(j)
}

/// Closed-form relabeling current: J^0 = -rho g_ab phidot^b phi^a_{,k}
/// sqrt(G) xi^k and J^k = (1/2 rho g phidot phidot - rho W - P J) sqrt(G)
/// xi^k for barotropic media; with a multiplier present the potential and
/// pressure part is rho W + P instead (P = lambda / sqrt(G)).
pub fn relabeling_current_closed(
    model: &MaterialModel,
    sample: &JetSample,
    xi: &[f64],
) -> Result<DVector<f64>> {
    let n = sample.n_space();
    let big_g = model.base_metric.eval(&sample.x)?;
    let g = model.fiber_metric.eval(sample.y.as_slice())?;
    let sqrt_g = big_g.determinant().sqrt();
    let rho = model.rho_at(&sample.x);
    let v0 = sample.time_velocity();
    let f = sample.spatial_block();
    let kinetic = 0.5 * rho * (v0.transpose() * &g * &v0)[(0, 0)];
    let w = model.stored_energy(sample)?;
    let j = model.jacobian(sample)?;
    let potential = match sample.lambda {
        Some(lambda) => {
            let p = lambda / sqrt_g;
            rho * w + p
        }
        None => {
            let p = model.material_pressure(sample)?;
            rho * w + p * j
        }
    };
    let scalar = (kinetic - potential) * sqrt_g;
    let gv = &g * &v0;
    let mut out = DVector::zeros(n + 1);
    for k in 0..n {
        let mut j0 = 0.0;
        for a in 0..sample.n_comp() {
            j0 -= rho * gv[a] * f[(a, k)] * sqrt_g;
        }
        out[0] += j0 * xi[k];
        out[k + 1] = scalar * xi[k];
    }
    Ok(out)
}

/// Closed-form time-translation current: J^0 = -zeta e and
/// J^k = -zeta p_a^k phidot^a.
pub fn time_translation_current_closed(
    model: &MaterialModel,
    sample: &JetSample,
    zeta: f64,
) -> Result<DVector<f64>> {
    let n = sample.n_space();
    let e = model.energy_density(sample)?;
    let momenta = model.legendre(sample)?;
    let v0 = sample.time_velocity();
    let mut out = DVector::zeros(n + 1);
    out[0] = -zeta * e;
    for k in 0..n {
        let mut s = 0.0;
        for a in 0..sample.n_comp() {
            s += momenta.pj[(a, k)] * v0[a];
        }
        out[k + 1] = -zeta * s;
    }
    Ok(out)
}

/// Closed-form fiber-translation current: J^mu = p_a^mu c^a.
pub fn fiber_translation_current_closed(
    model: &MaterialModel,
    sample: &JetSample,
    c: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = sample.n_space();
    let momenta = model.legendre(sample)?;
    let mut out = DVector::zeros(n + 1);
    out[0] = (momenta.p0.transpose() * c)[(0, 0)];
    for k in 0..n {
        for a in 0..sample.n_comp() {
            out[k + 1] += momenta.pj[(a, k)] * c[a];
        }
    }
    Ok(out)
}

/// Current components at every interior node of one level, via the generic
/// contraction.
pub fn current_field(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    gen: &SymmetryGenerator,
    level: usize,
) -> Result<NoetherCurrent> {
    let n = grid.n_space();
    let values: Result<Vec<Option<DVector<f64>>>> =
        exec::map_default(grid.n_nodes(), |node| -> Result<Option<DVector<f64>>> {
            if grid.is_fixed_node(&grid.node_multi(node)) {
                return Ok(None);
            }
            let jet = jet_extend(grid, field, node, level)?;
            Ok(Some(momentum_map(model, &jet, gen)?))
        })
        .into_iter()
        .collect();
    let values = values?;
    let mut j0 = Vec::with_capacity(values.len());
    let mut jk = Vec::with_capacity(values.len());
    for v in values {
        match v {
            Some(v) => {
                j0.push(Some(v[0]));
                jk.push(Some(DVector::from_fn(n, |k, _| v[k + 1])));
            }
            None => {
                j0.push(None);
                jk.push(None);
            }
        }
    }
    Ok(NoetherCurrent { j0, jk })
}

/// Discrete space-time divergence d_t J^0 + d_k J^k at interior nodes.
pub fn noether_divergence(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    gen: &SymmetryGenerator,
    level: usize,
) -> Result<Vec<Option<f64>>> {
    if level == 0 || level + 1 >= field.levels.len() {
        return Err(Error::IndexError(
            "noether divergence needs neighbor levels".into(),
        ));
    }
    let prev = current_field(model, grid, field, gen, level - 1)?;
    let cur = current_field(model, grid, field, gen, level)?;
    let next = current_field(model, grid, field, gen, level + 1)?;
    let n = grid.n_space();
    let mut out = vec![None; grid.n_nodes()];
    for node in 0..grid.n_nodes() {
        let multi = grid.node_multi(node);
        let (Some(j0p), Some(j0n)) = (prev.j0[node], next.j0[node]) else {
            continue;
        };
        let mut div = (j0n - j0p) / (2.0 * grid.dt);
        let mut full = true;
        for k in 0..n {
            let h = grid.spacing(k);
            match (grid.shift(&multi, k, -1), grid.shift(&multi, k, 1)) {
                (Some(m), Some(p)) => {
                    let (im, ip) = (grid.node_flat(&m), grid.node_flat(&p));
                    match (&cur.jk[im], &cur.jk[ip]) {
                        (Some(a), Some(b)) => div += (b[k] - a[k]) / (2.0 * h),
                        _ => full = false,
                    }
                }
                _ => full = false,
            }
        }
        if full {
            out[node] = Some(div);
        }
    }
    Ok(out)
}

/// Residual of the energy continuity equation,
/// d_t e + d_k (p_a^k phidot^a), at interior nodes.
pub fn energy_continuity_residual(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    level: usize,
) -> Result<Vec<Option<f64>>> {
    if level == 0 || level + 1 >= field.levels.len() {
        return Err(Error::IndexError(
            "energy continuity needs neighbor levels".into(),
        ));
    }
    let n = grid.n_space();
    let flux_and_e = |lvl: usize| -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
        let mut es = Vec::with_capacity(grid.n_nodes());
        let mut fluxes = Vec::with_capacity(grid.n_nodes());
        for node in 0..grid.n_nodes() {
            let jet = jet_extend(grid, field, node, lvl)?;
            es.push(model.energy_density(&jet)?);
            let momenta = model.legendre(&jet)?;
            let v0 = jet.time_velocity();
            fluxes.push(DVector::from_fn(n, |k, _| {
                (0..jet.n_comp()).map(|a| momenta.pj[(a, k)] * v0[a]).sum()
            }));
        }
        Ok((es, fluxes))
    };
    let (e_prev, _) = flux_and_e(level - 1)?;
    let (_, flux) = flux_and_e(level)?;
    let (e_next, _) = flux_and_e(level + 1)?;

    let mut out = vec![None; grid.n_nodes()];
    for node in 0..grid.n_nodes() {
        let multi = grid.node_multi(node);
        if grid.is_fixed_node(&multi) {
            continue;
        }
        let mut r = (e_next[node] - e_prev[node]) / (2.0 * grid.dt);
        let mut full = true;
        for k in 0..n {
            let h = grid.spacing(k);
            match (grid.shift(&multi, k, -1), grid.shift(&multi, k, 1)) {
                (Some(m), Some(p)) => {
                    r += (flux[grid.node_flat(&p)][k] - flux[grid.node_flat(&m)][k])
                        / (2.0 * h);
                }
                _ => full = false,
            }
        }
        if full {
            out[node] = Some(r);
        }
    }
    Ok(out)
}

/// Gap between the current divergence and the contraction of the field
/// equations: for any section, div J = R_a (eta^a - v^a_nu xi^nu) with the
/// residual scaled back by sqrt(det G). Returns the max-norm gap over
/// interior nodes.
pub fn noether_implies_el_check(
    model: &MaterialModel,
    grid: &SpaceTimeGrid,
    field: &ConfigurationField,
    gen: &SymmetryGenerator,
    level: usize,
) -> Result<f64> {
    let div = noether_divergence(model, grid, field, gen, level)?;
    let residual = crate::dynamics::el_residual_general(model, grid, field, level)?;
    let mut worst: f64 = 0.0;
    for node in 0..grid.n_nodes() {
        let (Some(d), Some(r)) = (&div[node], &residual.values[node]) else {
            continue;
        };
        let jet = jet_extend(grid, field, node, level)?;
        let sqrt_g = model.base_metric.det_sqrt(&jet.x)?;
        let prolonged = prolong_generator(gen, &jet)?;
        let mut contraction = 0.0;
        for a in 0..jet.n_comp() {
            let mut vert = prolonged.eta_fiber[a];
            for mu in 0..=grid.n_space() {
                vert -= jet.v[(a, mu)] * prolonged.xi_base[mu];
            }
            contraction += sqrt_g * r[a] * vert;
        }
        worst = worst.max((d - contraction).abs());
    }
    Ok(worst)
}

/// Applies a volume-preserving affine relabeling x -> A x + b to a jet:
/// the base point moves and the spatial slots transform by A^-1; fiber
/// data is untouched.
pub fn relabel_jet(sample: &JetSample, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<JetSample> {
    let n = sample.n_space();
    let a_inv = a.clone().try_inverse().ok_or_else(|| {
        Error::ShapeError("relabeling matrix is singular".into())
    })?;
    let mut out = sample.clone();
    for k in 0..n {
        out.x[k] = b[k];
        for m in 0..n {
            out.x[k] += a[(k, m)] * sample.x[m];
        }
    }
    let f = sample.spatial_block() * a_inv;
    out.v.columns_mut(1, n).copy_from(&f);
    Ok(out)
}
