//! Material models: stored-energy functions, deformation measures,
//! Lagrangian density, Legendre transform, and the stress and pressure
//! objects derived from them.
//!
//! All stored energies are per unit mass. Analytic partial derivatives are
//! shipped for every kind and cross-checked against finite differences in
//! the tests.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fields::{JetSample, REGULARITY_FLOOR};
use crate::geometry::MetricField;

/// Barotropic equation of state w(J) with its derivative.
#[derive(Clone)]
pub enum BarotropicLaw {
    /// w(J) = k (J - 1)^2 / 2.
    Quadratic { k: f64 },
    /// w(J) = J ln J - J + 1.
    LogType,
    /// User-supplied law; `d2w` is only needed for linearized solves.
    Custom {
        w: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        dw: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        d2w: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    },
}

impl BarotropicLaw {
    pub fn w(&self, j: f64) -> f64 {
        match self {
            BarotropicLaw::Quadratic { k } => 0.5 * k * (j - 1.0) * (j - 1.0),
            BarotropicLaw::LogType => j * j.ln() - j + 1.0,
            BarotropicLaw::Custom { w, .. } => w(j),
        }
    }

    pub fn dw(&self, j: f64) -> f64 {
        match self {
            BarotropicLaw::Quadratic { k } => k * (j - 1.0),
            BarotropicLaw::LogType => j.ln(),
            BarotropicLaw::Custom { dw, .. } => dw(j),
        }
    }

    pub fn d2w(&self, j: f64) -> Result<f64> {
        Ok(match self {
            BarotropicLaw::Quadratic { k } => *k,
            BarotropicLaw::LogType => 1.0 / j,
            BarotropicLaw::Custom { d2w, .. } => match d2w {
                Some(f) => f(j),
                None => {
                    return Err(Error::NonDifferentiable(
                        "custom barotropic law has no second derivative".into(),
                    ))
                }
            },
        })
    }
}

impl fmt::Debug for BarotropicLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BarotropicLaw::Quadratic { k } => write!(f, "Quadratic {{ k: {k} }}"),
            BarotropicLaw::LogType => write!(f, "LogType"),
            BarotropicLaw::Custom { .. } => write!(f, "Custom"),
        }
    }
}

/// Stored-energy function W, per unit mass.
#[derive(Debug, Clone)]
pub enum StoredEnergy {
    Constant(f64),
    /// W = w(J), pressure P = -rho w'(J).
    Barotropic(BarotropicLaw),
    /// W = (lambda/2) (tr_G E)^2 + mu tr_G(E^2), E = (C - G)/2.
    StVenant { lambda: f64, mu: f64 },
    /// W = (mu/2)(tr(G^-1 C) - n) - (mu/2) ln det(G^-1 C)
    ///   + (lambda/8) (ln det(G^-1 C))^2; stress-free at F = I when g = G.
    NeoHookean { mu: f64, lambda: f64 },
}

impl StoredEnergy {
    pub fn kind_name(&self) -> &'static str {
        match self {
            StoredEnergy::Constant(_) => "constant",
            StoredEnergy::Barotropic(_) => "barotropic",
            StoredEnergy::StVenant { .. } => "stvenant",
            StoredEnergy::NeoHookean { .. } => "neohookean",
        }
    }

    pub fn is_elastic(&self) -> bool {
        matches!(
            self,
            StoredEnergy::StVenant { .. } | StoredEnergy::NeoHookean { .. }
        )
    }

    fn jacobian_raw(big_g: &DMatrix<f64>, g: &DMatrix<f64>, f: &DMatrix<f64>) -> Result<f64> {
        let det_f = f.determinant();
        if det_f <= REGULARITY_FLOOR {
            return Err(Error::NonRegular {
                det: det_f,
                floor: REGULARITY_FLOOR,
            });
        }
        Ok(det_f * (g.determinant() / big_g.determinant()).sqrt())
    }

    /// W from the raw metric matrices and deformation gradient.
    pub fn value(
        &self,
        big_g: &DMatrix<f64>,
        g: &DMatrix<f64>,
        f: &DMatrix<f64>,
    ) -> Result<f64> {
        Ok(match self {
            StoredEnergy::Constant(c) => *c,
            StoredEnergy::Barotropic(law) => law.w(Self::jacobian_raw(big_g, g, f)?),
            StoredEnergy::StVenant { lambda, mu } => {
                let c = f.transpose() * g * f;
                let big_g_inv = invert(big_g)?;
                let e = 0.5 * (&c - big_g);
                let ge = &big_g_inv * &e;
                let tr = ge.trace();
                0.5 * lambda * tr * tr + mu * (&ge * &ge).trace()
            }
            StoredEnergy::NeoHookean { mu, lambda } => {
                let c = f.transpose() * g * f;
                let big_g_inv = invert(big_g)?;
                let a = &big_g_inv * &c;
                let det_a = a.determinant();
                if det_a <= 0.0 {
                    return Err(Error::NonRegular {
                        det: det_a,
                        floor: 0.0,
                    });
                }
                let n = c.nrows() as f64;
                let ln = det_a.ln();
                0.5 * mu * (a.trace() - n) - 0.5 * mu * ln + 0.125 * lambda * ln * ln
            }
        })
    }

    /// dW/dC for the C-dependent kinds (symmetric n x n).
    fn dw_dc(
        &self,
        big_g: &DMatrix<f64>,
        g: &DMatrix<f64>,
        f: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let c = f.transpose() * g * f;
        let big_g_inv = invert(big_g)?;
        Ok(match self {
            StoredEnergy::StVenant { lambda, mu } => {
                let e = 0.5 * (&c - big_g);
                let ge = &big_g_inv * &e;
                // dW/dE = lambda tr(G^-1 E) G^-1 + 2 mu G^-1 E G^-1; dE/dC = 1/2.
                0.5 * (*lambda * ge.trace() * &big_g_inv
                    + 2.0 * *mu * &big_g_inv * &e * &big_g_inv)
            }
            StoredEnergy::NeoHookean { mu, lambda } => {
                let a = &big_g_inv * &c;
                let ln = a.determinant().ln();
                let c_inv = invert(&c)?;
                0.5 * mu * &big_g_inv + (0.25 * lambda * ln - 0.5 * mu) * c_inv
            }
            _ => {
                return Err(Error::WrongEnergyKind {
                    expected: "stvenant or neohookean".into(),
                    found: self.kind_name().into(),
                })
            }
        })
    }

    /// dW/dF^a_j as an N x n matrix.
    pub fn d_dv(
        &self,
        big_g: &DMatrix<f64>,
        g: &DMatrix<f64>,
        f: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        Ok(match self {
            StoredEnergy::Constant(_) => DMatrix::zeros(f.nrows(), f.ncols()),
            StoredEnergy::Barotropic(law) => {
                let j = Self::jacobian_raw(big_g, g, f)?;
                let f_inv = invert(f)?;
                law.dw(j) * j * f_inv.transpose()
            }
            _ => {
                let s = self.dw_dc(big_g, g, f)?;
                2.0 * g * f * s
            }
        })
    }

    /// dW/dg_ab as a symmetric N x N matrix.
    pub fn d_dg(
        &self,
        big_g: &DMatrix<f64>,
        g: &DMatrix<f64>,
        f: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        Ok(match self {
            StoredEnergy::Constant(_) => DMatrix::zeros(g.nrows(), g.ncols()),
            StoredEnergy::Barotropic(law) => {
                let j = Self::jacobian_raw(big_g, g, f)?;
                let g_inv = invert(g)?;
                0.5 * law.dw(j) * j * g_inv
            }
            _ => {
                let s = self.dw_dc(big_g, g, f)?;
                f * s * f.transpose()
            }
        })
    }

    /// Directional derivative of dW/dF at F in the direction H.
    pub fn d2_dv_dir(
        &self,
        big_g: &DMatrix<f64>,
        g: &DMatrix<f64>,
        f: &DMatrix<f64>,
        h: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        Ok(match self {
            StoredEnergy::Constant(_) => DMatrix::zeros(f.nrows(), f.ncols()),
            StoredEnergy::Barotropic(law) => {
                let j = Self::jacobian_raw(big_g, g, f)?;
                let f_inv = invert(f)?;
                let dj = j * (&f_inv * h).trace();
                let dfinv_t = -(&f_inv * h * &f_inv).transpose();
                (law.d2w(j)? * dj * j + law.dw(j) * dj) * f_inv.transpose()
                    + law.dw(j) * j * dfinv_t
            }
            _ => {
                let s = self.dw_dc(big_g, g, f)?;
                let dc = f.transpose() * g * h + h.transpose() * g * f;
                let ds = self.dw_dc_dir(big_g, g, f, &dc)?;
                2.0 * g * (h * s + f * ds)
            }
        })
    }

    /// Directional derivative of dW/dC in the direction dC.
    fn dw_dc_dir(
        &self,
        big_g: &DMatrix<f64>,
        g: &DMatrix<f64>,
        f: &DMatrix<f64>,
        dc: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let big_g_inv = invert(big_g)?;
        Ok(match self {
            StoredEnergy::StVenant { lambda, mu } => {
                let de = 0.5 * dc;
                0.5 * (*lambda * (&big_g_inv * &de).trace() * &big_g_inv
                    + 2.0 * *mu * &big_g_inv * &de * &big_g_inv)
            }
            StoredEnergy::NeoHookean { mu, lambda } => {
                let c = f.transpose() * g * f;
                let a = &big_g_inv * &c;
                let ln = a.determinant().ln();
                let c_inv = invert(&c)?;
                let dln = (&c_inv * dc).trace();
                let dc_inv = -(&c_inv * dc * &c_inv);
                0.25 * lambda * dln * &c_inv + (0.25 * lambda * ln - 0.5 * mu) * dc_inv
            }
            _ => {
                return Err(Error::WrongEnergyKind {
                    expected: "stvenant or neohookean".into(),
                    found: self.kind_name().into(),
                })
            }
        })
    }
}

fn invert(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.clone().try_inverse().ok_or_else(|| Error::NonRegular {
        det: m.determinant(),
        floor: 0.0,
    })
}

type DensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Reference density, stored energy and the base/fiber metric pair.
#[derive(Clone)]
pub struct MaterialModel {
    pub rho: DensityFn,
    pub energy: StoredEnergy,
    /// Base (material) metric G on B.
    pub base_metric: MetricField,
    /// Fiber (spatial) metric g on M.
    pub fiber_metric: MetricField,
}

impl fmt::Debug for MaterialModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaterialModel")
            .field("energy", &self.energy)
            .field("base_metric", &self.base_metric)
            .field("fiber_metric", &self.fiber_metric)
            .finish()
    }
}

/// Conjugate momenta (p_a^0, p_a^j, Pi) and, in the constrained case, the
/// identically-zero multiplier momenta.
#[derive(Debug, Clone)]
pub struct Momenta {
    pub p0: DVector<f64>,
    /// pj[(a, j)], spatial momenta.
    pub pj: DMatrix<f64>,
    pub pi: f64,
    pub pi_mu: Option<DVector<f64>>,
}

impl MaterialModel {
    pub fn new(
        rho: DensityFn,
        energy: StoredEnergy,
        base_metric: MetricField,
        fiber_metric: MetricField,
    ) -> Self {
        Self {
            rho,
            energy,
            base_metric,
            fiber_metric,
        }
    }

    pub fn uniform(
        rho: f64,
        energy: StoredEnergy,
        base_metric: MetricField,
        fiber_metric: MetricField,
    ) -> Self {
        Self::new(Arc::new(move |_| rho), energy, base_metric, fiber_metric)
    }

    pub fn rho_at(&self, x: &[f64]) -> f64 {
        (self.rho)(x)
    }

    fn metrics_at(&self, sample: &JetSample) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let big_g = self.base_metric.eval(&sample.x)?;
        let g = self.fiber_metric.eval(sample.y.as_slice())?;
        Ok((big_g, g))
    }

    /// Metric-weighted Jacobian J = det F * sqrt(det g / det G).
    pub fn jacobian(&self, sample: &JetSample) -> Result<f64> {
        let (big_g, g) = self.metrics_at(sample)?;
        StoredEnergy::jacobian_raw(&big_g, &g, &sample.spatial_block())
    }

    /// Green deformation tensor C_ij = g_ab F^a_i F^b_j.
    pub fn green_tensor(&self, sample: &JetSample) -> Result<DMatrix<f64>> {
        let g = self.fiber_metric.eval(sample.y.as_slice())?;
        let f = sample.spatial_block();
        Ok(f.transpose() * g * f)
    }

    /// Inverse Finger tensor c_ab = G_ij (F^-1)^i_a (F^-1)^j_b.
    pub fn finger_inverse(&self, sample: &JetSample) -> Result<DMatrix<f64>> {
        let big_g = self.base_metric.eval(&sample.x)?;
        let f = sample.spatial_block();
        let f_inv = invert(&f)?;
        Ok(f_inv.transpose() * big_g * f_inv)
    }

    /// Stored energy per unit mass at the sample.
    pub fn stored_energy(&self, sample: &JetSample) -> Result<f64> {
        let (big_g, g) = self.metrics_at(sample)?;
        self.energy.value(&big_g, &g, &sample.spatial_block())
    }

    /// L = sqrt(det G) rho [ 1/2 g_ab v^a_0 v^b_0 - W ].
    pub fn lagrangian_density(&self, sample: &JetSample) -> Result<f64> {
        let (big_g, g) = self.metrics_at(sample)?;
        let v0 = sample.time_velocity();
        let kinetic = 0.5 * (v0.transpose() * &g * &v0)[(0, 0)];
        let w = self.energy.value(&big_g, &g, &sample.spatial_block())?;
        Ok(big_g.determinant().sqrt() * self.rho_at(&sample.x) * (kinetic - w))
    }

    /// Augmented density L + lambda (J - 1); requires a multiplier on the
    /// sample.
    pub fn augmented_lagrangian(&self, sample: &JetSample) -> Result<f64> {
        let lambda = sample.lambda.ok_or(Error::MissingMultiplier)?;
        Ok(self.lagrangian_density(sample)? + lambda * (self.jacobian(sample)? - 1.0))
    }

    /// Conjugate momenta. When the sample carries a multiplier the spatial
    /// momenta pick up the pressure term and pi_mu = 0 is reported.
    pub fn legendre(&self, sample: &JetSample) -> Result<Momenta> {
        let (big_g, g) = self.metrics_at(sample)?;
        let sqrt_det = big_g.determinant().sqrt();
        let rho = self.rho_at(&sample.x);
        let f = sample.spatial_block();
        let v0 = sample.time_velocity();
        let p0 = sqrt_det * rho * (&g * &v0);
        let mut pj = -sqrt_det * rho * self.energy.d_dv(&big_g, &g, &f)?;
        let mut lagr = self.lagrangian_density(sample)?;
        let pi_mu = if let Some(lambda) = sample.lambda {
            let j = StoredEnergy::jacobian_raw(&big_g, &g, &f)?;
            // d(lambda (J - 1))/dF = lambda J F^-T.
            pj += lambda * j * invert(&f)?.transpose();
            lagr += lambda * (j - 1.0);
            Some(DVector::zeros(sample.n_space() + 1))
        } else {
            None
        };
        let mut contraction = (&p0.transpose() * &v0)[(0, 0)];
        for a in 0..pj.nrows() {
            for j in 0..pj.ncols() {
                contraction += pj[(a, j)] * sample.v[(a, j + 1)];
            }
        }
        Ok(Momenta {
            p0,
            pj,
            pi: lagr - contraction,
            pi_mu,
        })
    }

    /// Energy density e = p_a^0 v^a_0 - L.
    pub fn energy_density(&self, sample: &JetSample) -> Result<f64> {
        let momenta = self.legendre(sample)?;
        let lagr = if sample.lambda.is_some() {
            self.augmented_lagrangian(sample)?
        } else {
            self.lagrangian_density(sample)?
        };
        Ok((&momenta.p0.transpose() * sample.time_velocity())[(0, 0)] - lagr)
    }

    /// Cartan form coefficients in the basis
    /// {dy^a wedge d^n x_0, dy^a wedge d^n x_j, d^{n+1} x}: identical to
    /// the conjugate momenta (p0, pj, Pi).
    pub fn cartan_coefficients(&self, sample: &JetSample) -> Result<Momenta> {
        self.legendre(sample)
    }

    /// Cauchy stress sigma^ab = (2 rho / J) dW/dg_ab.
    pub fn cauchy_stress(&self, sample: &JetSample) -> Result<DMatrix<f64>> {
        let (big_g, g) = self.metrics_at(sample)?;
        let f = sample.spatial_block();
        let j = StoredEnergy::jacobian_raw(&big_g, &g, &f)?;
        let dwdg = self.energy.d_dg(&big_g, &g, &f)?;
        Ok((2.0 * self.rho_at(&sample.x) / j) * dwdg)
    }

    /// Barotropic pressure P = -rho w'(J).
    pub fn material_pressure(&self, sample: &JetSample) -> Result<f64> {
        let law = match &self.energy {
            StoredEnergy::Barotropic(law) => law,
            other => {
                return Err(Error::WrongEnergyKind {
                    expected: "barotropic".into(),
                    found: other.kind_name().into(),
                })
            }
        };
        Ok(-self.rho_at(&sample.x) * law.dw(self.jacobian(sample)?))
    }

    /// First Piola-Kirchhoff stress P_a^i = rho dW/dv^a_i.
    pub fn piola_kirchhoff(&self, sample: &JetSample) -> Result<DMatrix<f64>> {
        let (big_g, g) = self.metrics_at(sample)?;
        let f = sample.spatial_block();
        Ok(self.rho_at(&sample.x) * self.energy.d_dv(&big_g, &g, &f)?)
    }

    /// J g sigma F^-T, computed through the Cauchy stress; equals the
    /// first Piola-Kirchhoff tensor for C-dependent energies.
    pub fn piola_transform(&self, sample: &JetSample) -> Result<DMatrix<f64>> {
        if !self.energy.is_elastic() && !matches!(self.energy, StoredEnergy::Constant(_)) {
            return Err(Error::WrongEnergyKind {
                expected: "stvenant, neohookean or constant".into(),
                found: self.energy.kind_name().into(),
            });
        }
        let (big_g, g) = self.metrics_at(sample)?;
        let f = sample.spatial_block();
        let j = StoredEnergy::jacobian_raw(&big_g, &g, &f)?;
        let sigma = self.cauchy_stress(sample)?;
        Ok(j * g * sigma * invert(&f)?.transpose())
    }

    /// Spatial density rho / J.
    pub fn spatial_density(&self, sample: &JetSample) -> Result<f64> {
        Ok(self.rho_at(&sample.x) / self.jacobian(sample)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn sample(f: DMatrix<f64>, v0: DVector<f64>, y: DVector<f64>) -> JetSample {
        let n = f.ncols();
        let nc = f.nrows();
        let mut v = DMatrix::zeros(nc, n + 1);
        v.column_mut(0).copy_from(&v0);
        v.columns_mut(1, n).copy_from(&f);
        JetSample {
            x: vec![0.5; n],
            t: 0.0,
            y,
            v,
            lambda: None,
            beta: None,
        }
    }

    fn identity_sample(n: usize) -> JetSample {
        sample(
            DMatrix::identity(n, n),
            DVector::zeros(n),
            DVector::from_vec(vec![0.5; n]),
        )
    }

    fn flat_model(energy: StoredEnergy, rho: f64, n: usize) -> MaterialModel {
        MaterialModel::uniform(
            rho,
            energy,
            MetricField::euclidean(n),
            MetricField::euclidean(n),
        )
    }

    fn quadratic() -> StoredEnergy {
        StoredEnergy::Barotropic(BarotropicLaw::Quadratic { k: 1.0 })
    }

    fn random_regular(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
        loop {
            let f = DMatrix::identity(n, n)
                + DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3));
            let d = f.determinant();
            if d > 0.5 && d < 2.0 {
                return f;
            }
        }
    }

    /// Central-difference derivative of W in every F slot.
    fn fd_dw_dv(
        energy: &StoredEnergy,
        big_g: &DMatrix<f64>,
        g: &DMatrix<f64>,
        f: &DMatrix<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        DMatrix::from_fn(f.nrows(), f.ncols(), |a, j| {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp[(a, j)] += h;
            fm[(a, j)] -= h;
            (energy.value(big_g, g, &fp).unwrap() - energy.value(big_g, g, &fm).unwrap())
                / (2.0 * h)
        })
    }

    /// Central-difference derivative of W in every g slot (symmetrized).
    fn fd_dw_dg(
        energy: &StoredEnergy,
        big_g: &DMatrix<f64>,
        g: &DMatrix<f64>,
        f: &DMatrix<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let n = g.nrows();
        let raw = DMatrix::from_fn(n, n, |a, b| {
            let mut gp = g.clone();
            let mut gm = g.clone();
            gp[(a, b)] += h;
            gm[(a, b)] -= h;
            (energy.value(big_g, &gp, f).unwrap() - energy.value(big_g, &gm, f).unwrap())
                / (2.0 * h)
        });
        // The analytic d_dg treats g as symmetric: off-diagonal slots each
        // carry half of the paired variation.
        DMatrix::from_fn(n, n, |a, b| {
            if a == b {
                raw[(a, b)]
            } else {
                0.5 * (raw[(a, b)] + raw[(b, a)])
            }
        })
    }

    #[test]
    fn jacobian_basics() {
        let m = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        assert_relative_eq!(m.jacobian(&identity_sample(2)).unwrap(), 1.0);

        let s = sample(
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])),
            DVector::zeros(2),
            DVector::zeros(2),
        );
        assert_relative_eq!(m.jacobian(&s).unwrap(), 6.0);

        let conformal = MaterialModel::uniform(
            1.0,
            StoredEnergy::Constant(0.0),
            MetricField::euclidean(2),
            MetricField::conformal_const(2, 2.0),
        );
        assert_relative_eq!(conformal.jacobian(&identity_sample(2)).unwrap(), 4.0);
    }

    #[test]
    fn green_and_finger_tensors() {
        let m = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        let c = m.green_tensor(&identity_sample(2)).unwrap();
        assert_relative_eq!((c - DMatrix::identity(2, 2)).amax(), 0.0);

        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let s = sample(f.clone(), DVector::zeros(2), DVector::zeros(2));
        let c = m.green_tensor(&s).unwrap();
        assert_relative_eq!(c[(0, 0)], 4.0);
        assert_relative_eq!(c[(1, 1)], 1.0);
        let finger = m.finger_inverse(&s).unwrap();
        assert_relative_eq!(finger[(0, 0)], 0.25);
        assert_relative_eq!(finger[(1, 1)], 1.0);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let f = random_regular(&mut rng, 2);
            let s = sample(f.clone(), DVector::zeros(2), DVector::zeros(2));
            let c = m.green_tensor(&s).unwrap();
            let oracle = f.transpose() * &f;
            assert!((c - &oracle).amax() < 1e-12);
            let fi = f.clone().try_inverse().unwrap();
            let finger_oracle = fi.transpose() * &fi;
            assert!((m.finger_inverse(&s).unwrap() - finger_oracle).amax() < 1e-12);
        }
    }

    #[test]
    fn lagrangian_density_values() {
        let m = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        let s = sample(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::zeros(2),
        );
        assert_relative_eq!(m.lagrangian_density(&s).unwrap(), 0.5);

        let m = flat_model(quadratic(), 1.0, 2);
        assert_relative_eq!(m.lagrangian_density(&identity_sample(2)).unwrap(), 0.0);

        let m = flat_model(StoredEnergy::Constant(3.0), 2.0, 2);
        let s = sample(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::zeros(2),
        );
        assert_relative_eq!(m.lagrangian_density(&s).unwrap(), -4.0);
    }

    #[test]
    fn legendre_momenta() {
        let m = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        let s = sample(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::zeros(2),
        );
        let mom = m.legendre(&s).unwrap();
        assert_relative_eq!(mom.p0[0], 1.0);
        assert_relative_eq!(mom.p0[1], 0.0);
        assert_relative_eq!(mom.pj.amax(), 0.0);

        let m = flat_model(quadratic(), 1.0, 2);
        let mom = m.legendre(&identity_sample(2)).unwrap();
        assert_relative_eq!(mom.pj.amax(), 0.0);

        // p_a^j = -w'(J) J (F^-1)^j_a against a finite-difference oracle.
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let s = sample(f.clone(), DVector::zeros(2), DVector::zeros(2));
        let mom = m.legendre(&s).unwrap();
        let eye = DMatrix::identity(2, 2);
        let fd = fd_dw_dv(&quadratic(), &eye, &eye, &f, 1e-6);
        assert!((&mom.pj + fd).amax() < 1e-6);
        // Closed form: w'(2) = 1, J = 2, F^-1 = diag(1/2, 1).
        assert_relative_eq!(mom.pj[(0, 0)], -1.0, max_relative = 1e-12);
        assert_relative_eq!(mom.pj[(1, 1)], -2.0, max_relative = 1e-12);
    }

    #[test]
    fn energy_density_values() {
        let m = flat_model(StoredEnergy::Constant(2.5), 1.0, 2);
        assert_relative_eq!(m.energy_density(&identity_sample(2)).unwrap(), 2.5);

        let m = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        let s = sample(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::zeros(2),
        );
        assert_relative_eq!(m.energy_density(&s).unwrap(), 0.5);

        // Kinetic + potential split evaluated independently.
        let m = flat_model(quadratic(), 2.0, 2);
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 1.0]));
        let s = sample(
            f,
            DVector::from_vec(vec![0.3, -0.2]),
            DVector::zeros(2),
        );
        let kinetic = 0.5 * 2.0 * (0.3f64 * 0.3 + 0.2 * 0.2);
        let potential = 2.0 * 0.5 * (1.5f64 - 1.0) * (1.5 - 1.0);
        assert_relative_eq!(
            m.energy_density(&s).unwrap(),
            kinetic + potential,
            max_relative = 1e-12
        );
    }

    #[test]
    fn cartan_pullback_identity() {
        // L equals p0.v0 + pj.vj + Pi at every sample.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = flat_model(quadratic(), 1.3, 2);
        for _ in 0..50 {
            let f = random_regular(&mut rng, 2);
            let v0 = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            let s = sample(f, v0, DVector::zeros(2));
            let mom = m.cartan_coefficients(&s).unwrap();
            let mut contraction = (&mom.p0.transpose() * s.time_velocity())[(0, 0)] + mom.pi;
            for a in 0..2 {
                for j in 0..2 {
                    contraction += mom.pj[(a, j)] * s.v[(a, j + 1)];
                }
            }
            assert_relative_eq!(
                contraction,
                m.lagrangian_density(&s).unwrap(),
                epsilon = 1e-12,
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn cauchy_stress_cases() {
        let m = flat_model(StoredEnergy::Constant(1.0), 1.0, 2);
        assert_relative_eq!(m.cauchy_stress(&identity_sample(2)).unwrap().amax(), 0.0);

        // Barotropic closed form: sigma = -P delta at J = 1.5.
        let m = flat_model(quadratic(), 1.0, 2);
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 1.0]));
        let s = sample(f, DVector::zeros(2), DVector::zeros(2));
        let sigma = m.cauchy_stress(&s).unwrap();
        let p = m.material_pressure(&s).unwrap();
        assert_relative_eq!(p, -0.5, max_relative = 1e-12);
        assert_relative_eq!(sigma[(0, 0)], 0.5, max_relative = 1e-12);
        assert_relative_eq!(sigma[(1, 1)], 0.5, max_relative = 1e-12);
        assert_relative_eq!(sigma[(0, 1)], 0.0);
    }

    #[test]
    fn stress_symmetry_all_kinds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let energies = [
            StoredEnergy::Constant(1.0),
            quadratic(),
            StoredEnergy::Barotropic(BarotropicLaw::LogType),
            StoredEnergy::StVenant {
                lambda: 1.2,
                mu: 0.8,
            },
            StoredEnergy::NeoHookean {
                mu: 0.9,
                lambda: 1.1,
            },
        ];
        for energy in &energies {
            let m = flat_model(energy.clone(), 1.0, 2);
            for _ in 0..100 {
                let f = random_regular(&mut rng, 2);
                let s = sample(f, DVector::zeros(2), DVector::zeros(2));
                let sigma = m.cauchy_stress(&s).unwrap();
                assert!((&sigma - sigma.transpose()).amax() < 1e-14);
            }
        }
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let energies = [
            quadratic(),
            StoredEnergy::Barotropic(BarotropicLaw::LogType),
            StoredEnergy::StVenant {
                lambda: 1.2,
                mu: 0.8,
            },
            StoredEnergy::NeoHookean {
                mu: 0.9,
                lambda: 1.1,
            },
        ];
        let eye = DMatrix::identity(2, 2);
        for energy in &energies {
            for _ in 0..100 {
                let f = random_regular(&mut rng, 2);
                let dv = energy.d_dv(&eye, &eye, &f).unwrap();
                let fd = fd_dw_dv(energy, &eye, &eye, &f, 1e-6);
                let scale = dv.amax().max(1.0);
                assert!(
                    (&dv - &fd).amax() / scale < 1e-5,
                    "{} d_dv mismatch {:.3e}",
                    energy.kind_name(),
                    (&dv - &fd).amax()
                );

                let dg = energy.d_dg(&eye, &eye, &f).unwrap();
                let fdg = fd_dw_dg(energy, &eye, &eye, &f, 1e-6);
                let scale = dg.amax().max(1.0);
                assert!(
                    (&dg - &fdg).amax() / scale < 1e-5,
                    "{} d_dg mismatch {:.3e}",
                    energy.kind_name(),
                    (&dg - &fdg).amax()
                );

                // Directional second derivative against differenced d_dv.
                let h = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
                let d2 = energy.d2_dv_dir(&eye, &eye, &f, &h).unwrap();
                let eps = 1e-6;
                let fp = energy.d_dv(&eye, &eye, &(&f + eps * &h)).unwrap();
                let fm = energy.d_dv(&eye, &eye, &(&f - eps * &h)).unwrap();
                let fd2 = (fp - fm) / (2.0 * eps);
                let scale = d2.amax().max(1.0);
                assert!(
                    (&d2 - &fd2).amax() / scale < 1e-5,
                    "{} d2_dv_dir mismatch {:.3e}",
                    energy.kind_name(),
                    (&d2 - &fd2).amax()
                );
            }
        }
    }

    #[test]
    fn barotropic_stress_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let laws = [
            quadratic(),
            StoredEnergy::Barotropic(BarotropicLaw::LogType),
        ];
        for energy in &laws {
            let m = flat_model(energy.clone(), 1.4, 2);
            for _ in 0..100 {
                let f = random_regular(&mut rng, 2);
                let s = sample(f, DVector::zeros(2), DVector::zeros(2));
                let sigma = m.cauchy_stress(&s).unwrap();
                let p = m.material_pressure(&s).unwrap();
                let expected = -p * DMatrix::identity(2, 2);
                let scale = sigma.amax().max(1e-30);
                assert!((sigma - expected).amax() / scale < 1e-10);
            }
        }
    }

    #[test]
    fn material_pressure_values() {
        let m = flat_model(quadratic(), 1.0, 2);
        assert_relative_eq!(m.material_pressure(&identity_sample(2)).unwrap(), 0.0);

        let m = flat_model(quadratic(), 2.0, 2);
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 1.0]));
        let s = sample(f, DVector::zeros(2), DVector::zeros(2));
        assert_relative_eq!(m.material_pressure(&s).unwrap(), -1.0, max_relative = 1e-12);

        let m = flat_model(StoredEnergy::Barotropic(BarotropicLaw::LogType), 1.0, 2);
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let s = sample(f, DVector::zeros(2), DVector::zeros(2));
        assert_relative_eq!(
            m.material_pressure(&s).unwrap(),
            -(2.0f64.ln()),
            max_relative = 1e-12
        );

        let m = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        assert!(matches!(
            m.material_pressure(&identity_sample(2)),
            Err(Error::WrongEnergyKind { .. })
        ));
    }

    #[test]
    fn piola_kirchhoff_cases() {
        let sv = StoredEnergy::StVenant {
            lambda: 1.2,
            mu: 0.8,
        };
        let m = flat_model(sv.clone(), 1.0, 2);
        assert_relative_eq!(
            m.piola_kirchhoff(&identity_sample(2)).unwrap().amax(),
            0.0
        );

        let m0 = flat_model(StoredEnergy::Constant(2.0), 1.0, 2);
        assert_relative_eq!(
            m0.piola_kirchhoff(&identity_sample(2)).unwrap().amax(),
            0.0
        );

        let m = flat_model(sv.clone(), 1.5, 2);
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![1.1, 1.0]));
        let s = sample(f.clone(), DVector::zeros(2), DVector::zeros(2));
        let pk = m.piola_kirchhoff(&s).unwrap();
        let eye = DMatrix::identity(2, 2);
        let fd = 1.5 * fd_dw_dv(&sv, &eye, &eye, &f, 1e-6);
        assert!((pk - fd).amax() < 1e-6);
    }

    #[test]
    fn piola_transform_matches_piola_kirchhoff() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let energies = [
            StoredEnergy::StVenant {
                lambda: 1.2,
                mu: 0.8,
            },
            StoredEnergy::NeoHookean {
                mu: 0.9,
                lambda: 1.1,
            },
        ];
        for energy in &energies {
            let m = flat_model(energy.clone(), 1.7, 2);
            for _ in 0..100 {
                let f = random_regular(&mut rng, 2);
                let s = sample(f, DVector::zeros(2), DVector::zeros(2));
                let pk = m.piola_kirchhoff(&s).unwrap();
                let pt = m.piola_transform(&s).unwrap();
                let scale = pk.amax().max(1e-30);
                assert!(
                    (pk - pt).amax() / scale < 1e-8,
                    "{} Piola identity violated",
                    energy.kind_name()
                );
            }
        }
    }

    #[test]
    fn constrained_legendre_and_augmented_density() {
        let m = flat_model(StoredEnergy::Constant(0.0), 1.0, 2);
        let mut s = identity_sample(2);
        assert!(matches!(
            m.augmented_lagrangian(&s),
            Err(Error::MissingMultiplier)
        ));
        s.lambda = Some(2.0);
        // J = 1: constraint term vanishes.
        assert_relative_eq!(
            m.augmented_lagrangian(&s).unwrap(),
            m.lagrangian_density(&s).unwrap()
        );
        let mom = m.legendre(&s).unwrap();
        assert_relative_eq!(mom.pi_mu.as_ref().unwrap().amax(), 0.0);
        // Multiplier pressure term: lambda J F^-T = 2 I at the identity.
        assert_relative_eq!(mom.pj[(0, 0)], 2.0);
        assert_relative_eq!(mom.pj[(1, 1)], 2.0);

        // L_phi - L = lambda (J - 1) at random samples.
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let f = random_regular(&mut rng, 2);
            let mut s = sample(f, DVector::zeros(2), DVector::zeros(2));
            s.lambda = Some(rng.gen_range(-1.0..1.0));
            let gap = m.augmented_lagrangian(&s).unwrap() - m.lagrangian_density(&s).unwrap();
            let expected = s.lambda.unwrap() * (m.jacobian(&s).unwrap() - 1.0);
            assert_relative_eq!(gap, expected, epsilon = 1e-13, max_relative = 1e-12);
        }
    }

    #[test]
    fn barotropic_law_derivative_consistency() {
        let laws = [
            BarotropicLaw::Quadratic { k: 2.0 },
            BarotropicLaw::LogType,
        ];
        for law in &laws {
            for i in 0..=30 {
                let j = 0.5 + 1.5 * i as f64 / 30.0;
                let h = 1e-6;
                let fd = (law.w(j + h) - law.w(j - h)) / (2.0 * h);
                let scale = law.dw(j).abs().max(1.0);
                assert!((law.dw(j) - fd).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn spatial_density_values() {
        let m = flat_model(quadratic(), 2.0, 2);
        assert_relative_eq!(m.spatial_density(&identity_sample(2)).unwrap(), 2.0);
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
        let s = sample(f, DVector::zeros(2), DVector::zeros(2));
        assert_relative_eq!(m.spatial_density(&s).unwrap(), 0.5);
    }
}
