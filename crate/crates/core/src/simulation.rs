//! Synthetic exposure/mediator/outcome data with known aggregation directions.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_dataset, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Regime {
    /// γ = 0.
    Complete,
    /// αη = 0.5 and γ chosen so the population MP equals `target_mp`.
    Partial { target_mp: f64 },
    Custom { gamma: f64, eta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Misspecify {
    None,
    ZeroA,
    ZeroB,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub rho_x: f64,
    pub rho_m: f64,
    pub c: f64,
    pub s: usize,
    pub sigma_y2: f64,
    pub regime: Regime,
    pub l_value: f64,
    pub seed: u64,
    pub misspecify: Misspecify,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 200,
            m: 20,
            q: 20,
            rho_x: 0.3,
            rho_m: 0.3,
            c: 0.5,
            s: 5,
            sigma_y2: 1.0,
            regime: Regime::Complete,
            l_value: -0.5,
            seed: 0,
            misspecify: Misspecify::None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s > self.m.min(self.q) || self.s == 0 {
            return Err(Error::Config(format!("s = {} must be in 1..=min(m, q)", self.s)));
        }
        for r in [self.rho_x, self.rho_m] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidRho(r));
            }
        }
        if !(self.sigma_y2 > 0.0) || self.n < 3 {
            return Err(Error::Config("sigma_y2 must be positive and n >= 3".into()));
        }
        if let Regime::Partial { target_mp } = self.regime {
            if !(target_mp > 0.0 && target_mp <= 1.0) {
                return Err(Error::Config(format!("target_mp {target_mp} outside (0, 1]")));
            }
        }
        Ok(())
    }

    fn loading(&self) -> DVector<f64> {
        DVector::from_fn(self.m.max(self.q), |i, _| if i < self.s { self.c } else { 0.0 })
    }
    fn a_vec(&self) -> DVector<f64> {
        self.loading().rows(0, self.m).into_owned()
    }
    fn b_vec(&self) -> DVector<f64> {
        self.loading().rows(0, self.q).into_owned()
    }
    /// X → M coefficient matrix (m × q).
    pub fn l_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.m, self.q, |_, k| if k < self.s { self.l_value } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimTruth {
    pub a_true: Vec<f64>,
    pub b_true: Vec<f64>,
    pub gamma: f64,
    pub eta: f64,
    pub mp_true: f64,
    pub population_alpha: f64,
}

pub fn compound_symmetry_cov(dim: usize, rho: f64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::InvalidRho(rho));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| if i == j { 1.0 } else { rho }))
}

fn standard_normals(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    // row-major draw order so a row is one observation
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        for j in 0..k {
            z[(i, j)] = StandardNormal.sample(rng);
        }
    }
    z
}

fn mvn_rows(rng: &mut ChaCha8Rng, mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let l = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite)?.l();
    let mut x = standard_normals(rng, n, cov.nrows()) * l.transpose();
    for mut row in x.row_iter_mut() {
        row += mean.transpose();
    }
    Ok(x)
}

/// n i.i.d. rows from N(mean, cov).
pub fn sample_mvn(mean: &DVector<f64>, cov: &DMatrix<f64>, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mvn_rows(&mut rng, mean, cov, n)
}

/// Population α = cov(X*, M*)/var(X*).
pub fn population_alpha(cfg: &SimConfig) -> Result<f64> {
    let sx = compound_symmetry_cov(cfg.m, cfg.rho_x)?;
    let a = cfg.a_vec();
    let b = cfg.b_vec();
    Ok(a.dot(&(&sx * cfg.l_matrix() * &b)) / a.dot(&(&sx * &a)))
}

/// (γ, η) implied by the regime.
pub fn regime_coefficients(cfg: &SimConfig) -> Result<(f64, f64)> {
    let alpha = population_alpha(cfg)?;
    match cfg.regime {
        Regime::Custom { gamma, eta } => Ok((gamma, eta)),
        Regime::Complete => {
            if alpha == 0.0 {
                return Err(Error::DegenerateRegime);
            }
            Ok((0.0, 0.5 / alpha))
        }
        Regime::Partial { target_mp } => {
            if alpha == 0.0 {
                return Err(Error::DegenerateRegime);
            }
            Ok((0.5 * (1.0 - target_mp) / target_mp, 0.5 / alpha))
        }
    }
}

pub fn population_mp(cfg: &SimConfig) -> Result<f64> {
    let alpha = population_alpha(cfg)?;
    let (gamma, eta) = regime_coefficients(cfg)?;
    let tau = gamma + alpha * eta;
    if tau == 0.0 {
        return Err(Error::DegenerateRegime);
    }
    Ok(alpha * eta / tau)
}

pub fn generate_dataset(cfg: &SimConfig) -> Result<(Dataset, SimTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sx = compound_symmetry_cov(cfg.m, cfg.rho_x)?;
    let sm = compound_symmetry_cov(cfg.q, cfg.rho_m)?;
    let x = mvn_rows(&mut rng, &DVector::zeros(cfg.m), &sx, cfg.n)?;
    let m = &x * cfg.l_matrix() + mvn_rows(&mut rng, &DVector::zeros(cfg.q), &sm, cfg.n)?;
    let (gamma, eta) = regime_coefficients(cfg)?;
    let mut a = cfg.a_vec();
    let mut b = cfg.b_vec();
    match cfg.misspecify {
        Misspecify::None => {}
        Misspecify::ZeroA => a.fill(0.0),
        Misspecify::ZeroB => b.fill(0.0),
    }
    let eps = DVector::from_fn(cfg.n, |_, _| StandardNormal.sample(&mut rng)) * cfg.sigma_y2.sqrt();
    let y = &x * &a * gamma + &m * &b * eta + eps;
    let d = validate_dataset(x, m, y)?;
    let truth = SimTruth {
        a_true: a.iter().cloned().collect(),
        b_true: b.iter().cloned().collect(),
        gamma,
        eta,
        mp_true: population_mp(cfg)?,
        population_alpha: population_alpha(cfg)?,
    };
    Ok((d, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compound_symmetry_cases() {
        assert_eq!(compound_symmetry_cov(3, 0.0).unwrap(), DMatrix::identity(3, 3));
        let c = compound_symmetry_cov(2, 0.3).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]));
        assert!(matches!(compound_symmetry_cov(2, 1.0), Err(Error::InvalidRho(_))));
    }

    #[test]
    fn cs_eigenvalues() {
        let e = nalgebra::SymmetricEigen::new(compound_symmetry_cov(6, 0.4).unwrap()).eigenvalues;
        let mut v: Vec<f64> = e.iter().cloned().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for x in &v[..5] {
            assert!((x - 0.6).abs() < 1e-12);
        }
        assert!((v[5] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sample_is_deterministic() {
        let cov = compound_symmetry_cov(3, 0.2).unwrap();
        let a = sample_mvn(&DVector::zeros(3), &cov, 10, 9).unwrap();
        assert_eq!(a, sample_mvn(&DVector::zeros(3), &cov, 10, 9).unwrap());
        assert_ne!(a, sample_mvn(&DVector::zeros(3), &cov, 10, 10).unwrap());
    }

    #[test]
    fn not_pd_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(sample_mvn(&DVector::zeros(2), &cov, 3, 0).unwrap_err(), Error::NotPositiveDefinite);
    }

    #[test]
    fn truth_layout() {
        let cfg = SimConfig::default();
        let (d, t) = generate_dataset(&cfg).unwrap();
        assert_eq!((d.n(), d.n_exposures(), d.n_mediators()), (200, 20, 20));
        assert_eq!(&t.a_true[..6], &[0.5, 0.5, 0.5, 0.5, 0.5, 0.0]);
        assert_eq!(t.mp_true, 1.0);
        assert_eq!(t.gamma, 0.0);
        let p = SimConfig { regime: Regime::Partial { target_mp: 0.5 }, ..cfg };
        assert!((population_mp(&p).unwrap() - 0.5).abs() < 1e-12);
        let (g, e) = regime_coefficients(&p).unwrap();
        assert!((g - 0.5).abs() < 1e-15 && (population_alpha(&p).unwrap() * e - 0.5).abs() < 1e-12);
        let p = SimConfig { regime: Regime::Partial { target_mp: 0.25 }, ..cfg };
        let (g, e) = regime_coefficients(&p).unwrap();
        assert!((g - 3.0 * population_alpha(&p).unwrap() * e).abs() < 1e-12);
    }

    #[test]
    fn population_alpha_closed_form() {
        // aᵀΣL b / aᵀΣa with Σ compound symmetric and L constant on the first s columns
        for &(rho, m) in &[(0.0, 20usize), (0.3, 20), (0.3, 50)] {
            let cfg = SimConfig { rho_x: rho, m, q: m, ..Default::default() };
            let s = 5.0;
            let c = 0.5;
            let row_sum = 1.0 + (m as f64 - 1.0) * rho;
            let num = c * (c * s) * (-0.5) * (s * row_sum);
            let den = c * c * (s + s * (s - 1.0) * rho);
            assert!((population_alpha(&cfg).unwrap() - num / den).abs() < 1e-12);
        }
    }
}
