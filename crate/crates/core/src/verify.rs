//! Quick numerical self-checks behind `aggmed verify`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::admm::{fit, screen_hessian, SolverOptions};
use crate::model::{standardize_columns, AggregationWeights, Normalization, PenaltyConfig};
use crate::oracle::{angular_error, fd_hessian, finite_diff_grad, grid_search_min, identify_from_moments};
use crate::profile::{compute_aggregates, profile_coefficients, Moments};
use crate::simulation::{generate_dataset, SimConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

fn spd(rng: &mut ChaCha8Rng, k: usize) -> DMatrix<f64> {
    let a = normal_matrix(rng, k, k);
    &a * a.transpose() / k as f64 + DMatrix::identity(k, k) * 0.5
}

fn small(n: usize, k: usize, seed: u64) -> crate::model::Dataset {
    let cfg = SimConfig { n, m: k, q: k, s: 1, seed, ..Default::default() };
    standardize_columns(&generate_dataset(&cfg).expect("valid config").0).expect("nondegenerate")
}

fn gradient_check() -> Check {
    let d = small(80, 3, 11);
    let mo = Moments::new(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
    let b = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
    let (a, b) = mo.normalize(&a, &b).expect("nonzero");
    let (ga, gb) = mo.grad(&a, &b, 0.0);
    let f = |v: &DVector<f64>| {
        let (x, y) = (v.rows(0, 3).into_owned(), v.rows(3, 3).into_owned());
        mo.normalize(&x, &y).map(|(x, y)| mo.smooth(&mo.scalars(&x, &y), 0.0)).unwrap_or(f64::NAN)
    };
    let v = DVector::from_iterator(6, a.iter().chain(b.iter()).cloned());
    let err = match finite_diff_grad(f, &v, 1e-6) {
        Ok(fd) => (0..6).map(|i| (fd[i] - if i < 3 { ga[i] } else { gb[i - 3] }).abs()).fold(0.0, f64::max),
        Err(_) => f64::INFINITY,
    };
    Check { name: "gradient", passed: err < 1e-6, detail: format!("max abs error {err:.2e}") }
}

fn saddle_check() -> Check {
    let f = |v: &DVector<f64>| v[0] * v[0] - v[1] * v[1];
    let min = fd_hessian(f, &DVector::zeros(2), 1e-4).map(|h| screen_hessian(&h).min_eigenvalue).unwrap_or(f64::NAN);
    Check { name: "saddle screen", passed: min < -1.0, detail: format!("min eigenvalue {min:.4}") }
}

fn oracle_check() -> Check {
    let mut worst = f64::NEG_INFINITY;
    let mut failures = 0;
    for seed in 0..5u64 {
        let d = small(50, 2, 100 + seed);
        let p = PenaltyConfig::new(0.05, 0.05, 0.0);
        let grid = match grid_search_min(&d, &p, 360) {
            Ok(g) => g.objective,
            Err(_) => continue,
        };
        match fit(&d, &p, &SolverOptions::default()) {
            Ok(r) => worst = worst.max(r.objective - grid),
            Err(_) => failures += 1,
        }
    }
    Check {
        name: "grid oracle",
        passed: failures == 0 && worst <= 1e-3,
        detail: format!("largest excess over grid minimum {worst:.2e}, {failures} failed fits"),
    }
}

fn identification_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for _ in 0..20 {
        let (m, q) = (rng.random_range(2..6), rng.random_range(2..6));
        let a0 = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        let b0 = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
        let alpha: f64 = rng.random_range(0.3..1.5);
        let (gamma, eta): (f64, f64) = (rng.random_range(0.2..1.0), rng.random_range(0.2..1.0));
        let sx = spd(&mut rng, m);
        let se = spd(&mut rng, q);
        let at: DMatrix<f64> = &a0 * b0.transpose() * (alpha / b0.norm_squared());
        let sxm = &sx * &at;
        let smm = at.transpose() * &sx * &at + se;
        let sxy = &sx * &a0 * (gamma + alpha * eta);
        let smy = sxm.transpose() * &a0 * gamma + &smm * &b0 * eta;
        match identify_from_moments(&sxm, &sxy, &smy, &sx, &smm, 1e-6, 1e-3) {
            Ok(id) => worst = worst.max(angular_error(&id.a_dir, &a0)).max(angular_error(&id.b_dir, &b0)),
            Err(_) => failures += 1,
        }
    }
    Check {
        name: "identification",
        passed: failures == 0 && worst < 1e-8,
        detail: format!("max angular error {worst:.2e}, {failures} failures"),
    }
}

fn mp_invariance_check() -> Check {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pen = PenaltyConfig::default();
    for seed in 0..20u64 {
        let d = small(60, 4, 300 + seed);
        let a = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
        let b = DVector::from_fn(4, |_, _| StandardNormal.sample(&mut rng));
        let mp = |a: &DVector<f64>, b: &DVector<f64>| -> Option<f64> {
            let w = AggregationWeights { a: a.clone(), b: b.clone(), normalization: Normalization::WeightUnit };
            let (xs, ms, _) = compute_aggregates(&d, &w).ok()?;
            profile_coefficients(&xs, &ms, &d.y, &pen).ok().map(|c| c.mp_hat)
        };
        let Some(base) = mp(&a, &b) else { continue };
        let unit = (&a / a.norm(), &b / b.norm());
        for (x, y) in [(unit.0.clone(), unit.1.clone()), (-&a, -&b), (&a * 3.0, &b * 0.1)] {
            if let Some(v) = mp(&x, &y) {
                worst = worst.max((v - base).abs());
            }
        }
    }
    Check { name: "MP invariance", passed: worst <= 1e-10, detail: format!("max deviation {worst:.2e}") }
}

pub fn run_all() -> Vec<Check> {
    vec![gradient_check(), saddle_check(), oracle_check(), identification_check(), mp_invariance_check()]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run_all() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
