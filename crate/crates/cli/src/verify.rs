//! Verification suites: seeded property checks per scenario with a
//! structured pass/fail report.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use continuum_core::conservation::{
    momentum_map, relabeling_current_closed, time_translation_current_closed, SymmetryGenerator,
};
use continuum_core::fields::JetSample;
use continuum_core::geometry::MetricField;
use continuum_core::material::{MaterialModel, StoredEnergy};

use crate::config::{Resolved, Scenario, TAU};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn check(name: &str, value: f64, tolerance: f64) -> Check {
    Check {
        name: name.into(),
        value,
        tolerance,
        pass: value.is_finite() && value <= tolerance,
    }
}

fn random_sample(rng: &mut ChaCha8Rng, n: usize, with_lambda: bool) -> JetSample {
    let f = loop {
        let f = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3));
        if f.determinant() > 0.4 {
            break f;
        }
    };
    let mut v = DMatrix::zeros(n, n + 1);
    v.column_mut(0)
        .copy_from(&DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)));
    v.columns_mut(1, n).copy_from(&f);
    JetSample {
        x: (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
        t: 0.0,
        y: DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0)),
        v,
        lambda: with_lambda.then(|| rng.gen_range(-1.0..1.0)),
        beta: None,
    }
}

fn stress_symmetry(model: &MaterialModel, rng: &mut ChaCha8Rng, n: usize) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = random_sample(rng, n, false);
        let sigma = model.cauchy_stress(&s)?;
        worst = worst.max((&sigma - sigma.transpose()).amax());
    }
    Ok(worst)
}

fn piola_identity(model: &MaterialModel, rng: &mut ChaCha8Rng, n: usize) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = random_sample(rng, n, false);
        let direct = model.piola_kirchhoff(&s)?;
        let transformed = model.piola_transform(&s)?;
        let scale = direct.amax().max(1e-30);
        worst = worst.max((&direct - &transformed).amax() / scale);
    }
    Ok(worst)
}

fn barotropic_stress(model: &MaterialModel, rng: &mut ChaCha8Rng, n: usize) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = random_sample(rng, n, false);
        let sigma = model.cauchy_stress(&s)?;
        let p = model.material_pressure(&s)?;
        let g_inv = model
            .fiber_metric
            .inverse(s.y.as_slice())?;
        let expected = -p * g_inv;
        let scale = expected.amax().max(1.0);
        worst = worst.max((&sigma - &expected).amax() / scale);
    }
    Ok(worst)
}

fn closed_form_currents(
    model: &MaterialModel,
    rng: &mut ChaCha8Rng,
    with_lambda: bool,
) -> anyhow::Result<f64> {
    let gen = SymmetryGenerator::from_stream_function(
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
    );
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s = random_sample(rng, 2, with_lambda);
        let generic = momentum_map(model, &s, &gen)?;
        let SymmetryGenerator::Relabeling { xi, .. } = &gen else {
            unreachable!()
        };
        let closed = relabeling_current_closed(model, &s, &xi(&s.x))?;
        let scale = closed.amax().max(1.0);
        worst = worst.max((&generic - &closed).amax() / scale);

        let generic_t = momentum_map(model, &s, &SymmetryGenerator::TimeTranslation { zeta: 0.7 })?;
        let closed_t = time_translation_current_closed(model, &s, 0.7)?;
        worst = worst.max((&generic_t - &closed_t).amax() / closed_t.amax().max(1.0));
    }
    Ok(worst)
}

fn polar_christoffel(rng: &mut ChaCha8Rng) -> anyhow::Result<(f64, f64)> {
    let metric = MetricField::polar();
    let mut worst = 0.0f64;
    let mut worst_det = 0.0f64;
    for _ in 0..100 {
        let r = rng.gen_range(0.5..2.0);
        let theta = rng.gen_range(0.0..TAU);
        let x = [r, theta];
        let gamma = metric.christoffel(&x)?.gamma;
        let mut expected = vec![DMatrix::zeros(2, 2); 2];
        expected[0][(1, 1)] = -r;
        expected[1][(0, 1)] = 1.0 / r;
        expected[1][(1, 0)] = 1.0 / r;
        for c in 0..2 {
            worst = worst.max((&gamma[c] - &expected[c]).amax());
        }
        worst_det = worst_det.max((metric.det_sqrt(&x)? - r).abs());
    }
    Ok((worst, worst_det))
}

pub fn run_checks(resolved: &Resolved, seed: u64) -> anyhow::Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = resolved.model();
    let n = resolved.dim;
    let mut checks = Vec::new();

    if resolved.scenario == Scenario::MetricCheckPolar {
        let (gamma, det) = polar_christoffel(&mut rng)?;
        checks.push(check("polar_christoffel_oracle", gamma, 1e-10));
        checks.push(check("polar_volume_element", det, 1e-12));
        return Ok(checks);
    }

    checks.push(check(
        "stress_symmetry",
        stress_symmetry(&model, &mut rng, n)?,
        1e-12,
    ));
    match &model.energy {
        StoredEnergy::StVenant { .. } | StoredEnergy::NeoHookean { .. } => {
            checks.push(check(
                "piola_identity",
                piola_identity(&model, &mut rng, n)?,
                1e-8,
            ));
        }
        StoredEnergy::Barotropic(_) => {
            checks.push(check(
                "barotropic_stress_form",
                barotropic_stress(&model, &mut rng, n)?,
                1e-10,
            ));
        }
        StoredEnergy::Constant(_) => {}
    }
    // The closed-form relabeling current applies to fluids only.
    let fluid = matches!(
        &model.energy,
        StoredEnergy::Barotropic(_) | StoredEnergy::Constant(_)
    );
    if n == 2 && fluid {
        let with_lambda = resolved.constrained;
        checks.push(check(
            "noether_closed_forms",
            closed_form_currents(&model, &mut rng, with_lambda)?,
            1e-12,
        ));
    }
    Ok(checks)
}
