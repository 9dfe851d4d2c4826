//! Shared data types, normalization conventions and validation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose centered sample sd falls below this are rejected.
pub const ZERO_SD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_names: Vec<String>,
    pub m_names: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn n_exposures(&self) -> usize {
        self.x.ncols()
    }
    pub fn n_mediators(&self) -> usize {
        self.m.ncols()
    }

    pub fn with_names(mut self, x_names: Vec<String>, m_names: Vec<String>) -> Result<Self> {
        if x_names.len() != self.x.ncols() || m_names.len() != self.m.ncols() {
            return Err(Error::DimensionMismatch("column label count".into()));
        }
        self.x_names = x_names;
        self.m_names = m_names;
        Ok(self)
    }

    /// Rows `idx` of every matrix, labels carried over.
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            m: self.m.select_rows(idx),
            y: self.y.select_rows(idx),
            x_names: self.x_names.clone(),
            m_names: self.m_names.clone(),
        }
    }
}

fn default_names(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("{prefix}{i}")).collect()
}

fn column_sd(col: nalgebra::DVectorView<f64>) -> f64 {
    let n = col.len() as f64;
    let mean = col.sum() / n;
    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1.0)).sqrt()
}

fn check_matrix(name: &'static str, a: &DMatrix<f64>) -> Result<()> {
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if !a[(i, j)].is_finite() {
                return Err(Error::NonFiniteEntry { matrix: name, row: i, col: j });
            }
        }
    }
    for j in 0..a.ncols() {
        if column_sd(a.column(j)) < ZERO_SD {
            return Err(Error::ZeroVarianceColumn { matrix: name, col: j });
        }
    }
    Ok(())
}

pub fn validate_dataset(x: DMatrix<f64>, m: DMatrix<f64>, y: DVector<f64>) -> Result<Dataset> {
    let n = y.len();
    if x.nrows() != n || m.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "X has {} rows, M has {} rows, Y has length {}",
            x.nrows(),
            m.nrows(),
            n
        )));
    }
    if n < 3 {
        return Err(Error::DimensionMismatch(format!("need n >= 3, got {n}")));
    }
    if x.ncols() == 0 || m.ncols() == 0 {
        return Err(Error::DimensionMismatch("X and M need at least one column".into()));
    }
    check_matrix("X", &x)?;
    check_matrix("M", &m)?;
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry { matrix: "Y", row: i, col: 0 });
    }
    let x_names = default_names("X", x.ncols());
    let m_names = default_names("M", m.ncols());
    Ok(Dataset { x, m, y, x_names, m_names })
}

fn standardize_matrix(name: &'static str, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows() as f64;
    let mut out = a.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / (n - 1.0)).sqrt();
        if sd < ZERO_SD {
            return Err(Error::ZeroVarianceColumn { matrix: name, col: j });
        }
        col /= sd;
    }
    Ok(out)
}

/// Center and scale X, M columns (sd divisor n - 1); center Y only.
pub fn standardize_columns(d: &Dataset) -> Result<Dataset> {
    let x = standardize_matrix("X", &d.x)?;
    let m = standardize_matrix("M", &d.m)?;
    let mean = d.y.mean();
    let y = d.y.add_scalar(-mean);
    Ok(Dataset { x, m, y, x_names: d.x_names.clone(), m_names: d.m_names.clone() })
}

/// Replace every column of X, M and Y by its OLS residual on [1, C].
pub fn residualize_covariates(d: &Dataset, c: &DMatrix<f64>) -> Result<Dataset> {
    let n = d.n();
    if c.nrows() != n {
        return Err(Error::DimensionMismatch(format!("C has {} rows, expected {n}", c.nrows())));
    }
    // constant columns duplicate the implicit intercept
    let keep: Vec<usize> = (0..c.ncols()).filter(|&j| column_sd(c.column(j)) >= ZERO_SD).collect();
    if keep.len() + 1 >= n {
        return Err(Error::RankDeficientCovariates);
    }
    let mut design = DMatrix::from_element(n, keep.len() + 1, 1.0);
    design.columns_mut(1, keep.len()).copy_from(&c.select_columns(&keep));
    let scale = design.column_iter().map(|col| col.norm()).fold(0.0, f64::max);
    let qr = design.qr();
    let r = qr.r();
    for i in 0..r.nrows() {
        if r[(i, i)].abs() <= 1e-10 * scale {
            return Err(Error::RankDeficientCovariates);
        }
    }
    let q = qr.q();
    let project_out = |v: &DMatrix<f64>| v - &q * (q.transpose() * v);
    let y = project_out(&DMatrix::from_column_slice(n, 1, d.y.as_slice()));
    Ok(Dataset {
        x: project_out(&d.x),
        m: project_out(&d.m),
        y: DVector::from_column_slice(y.as_slice()),
        x_names: d.x_names.clone(),
        m_names: d.m_names.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// ‖Xa‖ = ‖Mb‖ = 1.
    AggregateUnit,
    /// ‖a‖ = ‖b‖ = 1.
    WeightUnit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub normalization: Normalization,
}

impl AggregationWeights {
    /// Rescale `a`, `b` to the requested normalization.
    pub fn normalized(&self, d: &Dataset, target: Normalization) -> Result<Self> {
        let (sa, sb) = match target {
            Normalization::AggregateUnit => ((&d.x * &self.a).norm(), (&d.m * &self.b).norm()),
            Normalization::WeightUnit => (self.a.norm(), self.b.norm()),
        };
        if sa < ZERO_SD || sb < ZERO_SD {
            return Err(Error::ZeroAggregate);
        }
        Ok(AggregationWeights { a: &self.a / sa, b: &self.b / sb, normalization: target })
    }

    /// The factors h_a = ‖Xa‖/‖a‖ and h_b = ‖Mb‖/‖b‖.
    pub fn scale_factors(&self, d: &Dataset) -> (f64, f64) {
        ((&d.x * &self.a).norm() / self.a.norm(), (&d.m * &self.b).norm() / self.b.norm())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfiledCoefficients {
    pub tau_hat: f64,
    pub alpha_hat: f64,
    pub gamma_hat: f64,
    pub eta_hat: f64,
    pub mp_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_n: f64,
    pub rho: f64,
    pub r0: f64,
    pub delta: f64,
    pub c_lambda: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig { lambda_a: 0.0, lambda_b: 0.0, lambda_n: 0.0, rho: 1.0, r0: 1e-3, delta: 1e-2, c_lambda: 1.0 }
    }
}

impl PenaltyConfig {
    pub fn new(lambda_a: f64, lambda_b: f64, lambda_n: f64) -> Self {
        PenaltyConfig { lambda_a, lambda_b, lambda_n, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_a >= 0.0
            && self.lambda_b >= 0.0
            && self.lambda_n >= 0.0
            && self.rho > 0.0
            && self.r0 > 0.0
            && self.delta > 0.0
            && self.delta < 1.0
            && self.c_lambda > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidPenalty(format!("{self:?}")))
        }
    }

    pub fn effective_lambda_a(&self) -> f64 {
        self.c_lambda * self.lambda_a
    }
    pub fn effective_lambda_b(&self) -> f64 {
        self.c_lambda * self.lambda_b
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    ConvergedResiduals,
    ConvergedObjective,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub weights: AggregationWeights,
    pub coefficients: ProfiledCoefficients,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub primal_residual_final: f64,
    pub dual_residual_final: f64,
    pub support_a: Vec<usize>,
    pub support_b: Vec<usize>,
    pub restarts_used: usize,
    pub is_local_min: bool,
    pub min_hessian_eigenvalue: f64,
    /// Norm of the projected subgradient at the reported weights.
    pub stationarity: f64,
    /// Largest L_rho increase over any primal sweep of any chain.
    pub max_sweep_increase: f64,
    pub chosen_restart: usize,
    /// Objective of each restart chain; `None` when the chain was rejected.
    pub restart_objectives: Vec<Option<f64>>,
}

pub fn support(v: &DVector<f64>) -> Vec<usize> {
    v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(x: DMatrix<f64>, m: DMatrix<f64>, y: DVector<f64>) -> Dataset {
        validate_dataset(x, m, y).unwrap()
    }

    #[test]
    fn rejects_row_mismatch() {
        let r = validate_dataset(DMatrix::from_fn(10, 3, |i, j| (i * j) as f64), DMatrix::zeros(9, 3), DVector::zeros(10));
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn rejects_constant_column() {
        let x = DMatrix::from_fn(5, 2, |i, j| if j == 1 { 3.0 } else { i as f64 });
        let m = DMatrix::from_fn(5, 1, |i, _| (i * i) as f64);
        let r = validate_dataset(x, m, DVector::from_fn(5, |i, _| i as f64));
        assert_eq!(r, Err(Error::ZeroVarianceColumn { matrix: "X", col: 1 }));
    }

    #[test]
    fn rejects_nan() {
        let mut x = DMatrix::from_fn(5, 2, |i, j| (i + j * i) as f64);
        x[(2, 1)] = f64::NAN;
        let m = DMatrix::from_fn(5, 1, |i, _| (i * i) as f64);
        let r = validate_dataset(x, m, DVector::from_fn(5, |i, _| i as f64));
        assert_eq!(r, Err(Error::NonFiniteEntry { matrix: "X", row: 2, col: 1 }));
    }

    #[test]
    fn standardizes_simple_column() {
        let d = ds(
            DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]),
            DMatrix::from_column_slice(3, 1, &[0.0, 5.0, 1.0]),
            DVector::from_vec(vec![1.0, 1.0, 4.0]),
        );
        let s = standardize_columns(&d).unwrap();
        assert_eq!(s.x.as_slice(), &[-1.0, 0.0, 1.0]);
        assert!((s.y.sum()).abs() < 1e-15);
        assert_eq!(s.y[2], 2.0);
    }

    #[test]
    fn intercept_only_residualization_centers() {
        let d = ds(
            DMatrix::from_fn(6, 2, |i, j| ((i + 1) * (j + 2)) as f64 + (i * i) as f64),
            DMatrix::from_fn(6, 1, |i, _| (i as f64).sin()),
            DVector::from_fn(6, |i, _| i as f64 * 0.5 + 1.0),
        );
        let c = DMatrix::from_element(6, 1, 1.0);
        let r = residualize_covariates(&d, &c).unwrap();
        let r0 = residualize_covariates(&d, &DMatrix::zeros(6, 0)).unwrap();
        assert!((&r.x - &r0.x).amax() < 1e-14);
        for j in 0..2 {
            let col = d.x.column(j);
            let mean = col.mean();
            for i in 0..6 {
                assert!((r.x[(i, j)] - (col[i] - mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_covariates_rejected() {
        let n = 6;
        let d = ds(
            DMatrix::from_fn(n, 1, |i, _| (i as f64).cos()),
            DMatrix::from_fn(n, 1, |i, _| (i as f64).sin()),
            DVector::from_fn(n, |i, _| i as f64),
        );
        let c = DMatrix::from_fn(n, 2, |i, j| (i as f64) * (j + 1) as f64);
        assert_eq!(residualize_covariates(&d, &c), Err(Error::RankDeficientCovariates));
    }

    #[test]
    fn exact_linear_outcome_leaves_zero_residual() {
        let n = 8;
        let c = DMatrix::from_fn(n, 1, |i, _| (i as f64).powi(2));
        let d = ds(
            DMatrix::from_fn(n, 1, |i, _| (i as f64).cos()),
            DMatrix::from_fn(n, 1, |i, _| (i as f64).sin()),
            DVector::from_fn(n, |i, _| 2.0 + 3.0 * (i as f64).powi(2)),
        );
        let r = residualize_covariates(&d, &c).unwrap();
        assert!(r.y.amax() < 1e-10);
    }

    #[test]
    fn weight_conversion_round_trip() {
        let d = ds(
            DMatrix::from_fn(7, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.1 * j as f64),
            DMatrix::from_fn(7, 2, |i, j| ((i * 3 + j) % 4) as f64),
            DVector::from_fn(7, |i, _| i as f64),
        );
        let w = AggregationWeights {
            a: DVector::from_vec(vec![0.3, -1.0, 2.0]),
            b: DVector::from_vec(vec![1.5, 0.25]),
            normalization: Normalization::WeightUnit,
        }
        .normalized(&d, Normalization::WeightUnit)
        .unwrap();
        let back = w
            .normalized(&d, Normalization::AggregateUnit)
            .unwrap()
            .normalized(&d, Normalization::WeightUnit)
            .unwrap();
        assert!((&back.a - &w.a).norm() < 1e-12);
        assert!((&back.b - &w.b).norm() < 1e-12);
    }

    #[test]
    fn penalty_validation() {
        assert!(PenaltyConfig::default().validate().is_ok());
        assert!(PenaltyConfig { delta: 1.0, ..Default::default() }.validate().is_err());
        assert!(PenaltyConfig { lambda_a: -0.1, ..Default::default() }.validate().is_err());
    }
}
