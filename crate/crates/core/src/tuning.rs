//! K-fold cross-validation over a (λa, λb, λn) grid.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{fit, fit_problem, Problem, SolverOptions};
use crate::error::{Error, Result};
use crate::model::{validate_dataset, Dataset, PenaltyConfig, ZERO_SD};
use crate::profile::compute_aggregates;

pub const DEFAULT_GRID: [f64; 5] = [0.02, 0.05, 0.1, 0.2, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvCriterion {
    /// Held-out unpenalized profiled loss.
    #[default]
    ProfiledLoss,
    /// Held-out mean squared error of Y on (X*, M*).
    OutcomeMse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvGrid {
    pub lambda_a_values: Vec<f64>,
    pub lambda_b_values: Vec<f64>,
    pub lambda_n_values: Vec<f64>,
    pub k_folds: usize,
    pub fold_seed: u64,
    pub criterion: CvCriterion,
    /// Standardize with full-data statistics instead of per training fold.
    pub global_standardization: bool,
    /// Template for rho, r0, delta and c_lambda.
    pub base: PenaltyConfig,
}

impl Default for CvGrid {
    fn default() -> Self {
        CvGrid {
            lambda_a_values: DEFAULT_GRID.to_vec(),
            lambda_b_values: DEFAULT_GRID.to_vec(),
            lambda_n_values: DEFAULT_GRID.to_vec(),
            k_folds: 5,
            fold_seed: 0,
            criterion: CvCriterion::ProfiledLoss,
            global_standardization: false,
            base: PenaltyConfig::default(),
        }
    }
}

impl CvGrid {
    pub fn single(p: &PenaltyConfig) -> Self {
        CvGrid {
            lambda_a_values: vec![p.lambda_a],
            lambda_b_values: vec![p.lambda_b],
            lambda_n_values: vec![p.lambda_n],
            base: *p,
            ..Default::default()
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for v in [&self.lambda_a_values, &self.lambda_b_values, &self.lambda_n_values] {
            if v.is_empty() || v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::InvalidPenalty("grid lists must be nonempty and nonnegative".into()));
            }
        }
        if self.k_folds < 2 || self.k_folds > n {
            return Err(Error::InvalidFoldCount { n, k: self.k_folds });
        }
        self.base.validate()
    }

    /// Cells in lexicographic (λa, λb, λn) order.
    pub fn cells(&self) -> Vec<PenaltyConfig> {
        let mut out = Vec::new();
        for &la in &self.lambda_a_values {
            for &lb in &self.lambda_b_values {
                for &ln in &self.lambda_n_values {
                    out.push(PenaltyConfig { lambda_a: la, lambda_b: lb, lambda_n: ln, ..self.base });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvCell {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_n: f64,
    pub mean_loss: f64,
    pub se_loss: f64,
    pub failed_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvReport {
    pub cells: Vec<CvCell>,
    pub selected: PenaltyConfig,
    pub selected_fold_losses: Vec<f64>,
    pub k_folds: usize,
    pub non_descent_events: usize,
    /// Largest primal-sweep increase of L_rho over every successful fold fit.
    pub max_sweep_increase: f64,
}

pub fn fold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::InvalidFoldCount { n, k });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    Ok(folds)
}

struct ColumnStats {
    mean: DVector<f64>,
    sd: DVector<f64>,
}

fn column_stats(a: &DMatrix<f64>, matrix: &'static str) -> Result<ColumnStats> {
    let n = a.nrows() as f64;
    let mean = DVector::from_fn(a.ncols(), |j, _| a.column(j).sum() / n);
    let sd = DVector::from_fn(a.ncols(), |j, _| {
        let mu = mean[j];
        (a.column(j).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0)).sqrt()
    });
    if let Some(col) = sd.iter().position(|&s| s < ZERO_SD) {
        return Err(Error::ZeroVarianceColumn { matrix, col });
    }
    Ok(ColumnStats { mean, sd })
}

fn apply(a: &DMatrix<f64>, s: &ColumnStats) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| (a[(i, j)] - s.mean[j]) / s.sd[j])
}

/// Standardizes `train` and `test` with statistics taken from `reference`.
fn standardize_pair(reference: &Dataset, train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset)> {
    let sx = column_stats(&reference.x, "X")?;
    let sm = column_stats(&reference.m, "M")?;
    let ybar = reference.y.mean();
    let one = |d: &Dataset| -> Result<Dataset> {
        let mut out = validate_dataset(apply(&d.x, &sx), apply(&d.m, &sm), d.y.add_scalar(-ybar))?;
        out.x_names = d.x_names.clone();
        out.m_names = d.m_names.clone();
        Ok(out)
    };
    Ok((one(train)?, one(test)?))
}

fn fold_datasets(d: &Dataset, folds: &[Vec<usize>], global: bool) -> Result<Vec<(Dataset, Dataset)>> {
    folds
        .iter()
        .map(|fold| {
            let train_idx: Vec<usize> = (0..d.n()).filter(|i| fold.binary_search(i).is_err()).collect();
            let train = d.select_rows(&train_idx);
            let test = d.select_rows(fold);
            let reference = if global { d } else { &train };
            standardize_pair(reference, &train, &test)
        })
        .collect()
}

/// Held-out loss of a training fit on an already standardized test set.
pub fn held_out_loss(
    train_n: usize,
    test: &Dataset,
    w: &crate::model::AggregationWeights,
    c: &crate::model::ProfiledCoefficients,
    criterion: CvCriterion,
) -> Result<f64> {
    let (xs, ms, _) = compute_aggregates(test, w)?;
    let nt = test.n() as f64;
    // unit aggregates on fewer rows carry larger entries; slopes shrink to match
    let k = (nt / train_n as f64).sqrt();
    let (tau, gamma, eta, alpha) = (c.tau_hat * k, c.gamma_hat * k, c.eta_hat * k, c.alpha_hat);
    let y = &test.y;
    let full = y - &xs * gamma - &ms * eta;
    match criterion {
        CvCriterion::OutcomeMse => Ok(full.norm_squared() / nt),
        CvCriterion::ProfiledLoss => {
            let ssr_total = (y - &xs * tau).norm_squared();
            let ssr_med = (&ms - &xs * alpha).norm_squared();
            Ok((ssr_total + ssr_med + full.norm_squared() / (1.0 - alpha * alpha)) / (2.0 * nt))
        }
    }
}

/// Fits on `train` and evaluates on `test`; both must share standardization.
pub fn cv_loss(train: &Dataset, test: &Dataset, p: &PenaltyConfig, opts: &SolverOptions, criterion: CvCriterion) -> Result<f64> {
    let r = fit(train, p, opts)?;
    held_out_loss(train.n(), test, &r.weights, &r.coefficients, criterion)
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    if !mean.is_finite() {
        return (f64::INFINITY, f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// True when `a` beats `b` under lowest loss, then larger λa+λb, then larger λa.
fn better(a: &CvCell, b: &CvCell) -> bool {
    if a.mean_loss != b.mean_loss {
        return a.mean_loss < b.mean_loss;
    }
    let (sa, sb) = (a.lambda_a + a.lambda_b, b.lambda_a + b.lambda_b);
    if sa != sb {
        return sa > sb;
    }
    a.lambda_a > b.lambda_a
}

pub fn cv_select(d: &Dataset, grid: &CvGrid, opts: &SolverOptions) -> Result<CvReport> {
    grid.validate(d.n())?;
    opts.validate()?;
    let folds = fold_split(d.n(), grid.k_folds, grid.fold_seed)?;
    let sets = fold_datasets(d, &folds, grid.global_standardization)?;
    let cells = grid.cells();
    let k = folds.len();
    // one set of moments and eigendecompositions per fold, shared by every cell
    let bases: Vec<Result<Problem>> = sets.par_iter().map(|(train, _)| Problem::new(train, &cells[0])).collect();
    let tasks: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..k).map(move |f| (c, f))).collect();
    let results: Vec<Result<(f64, f64)>> = tasks
        .par_iter()
        .map(|&(c, f)| {
            let (train, test) = &sets[f];
            let prob = bases[f].as_ref().map_err(Clone::clone)?.with_penalty(&cells[c])?;
            let r = fit_problem(&prob, opts)?;
            let loss = held_out_loss(train.n(), test, &r.weights, &r.coefficients, grid.criterion)?;
            Ok((loss, r.max_sweep_increase))
        })
        .collect();
    let mut non_descent = 0;
    let mut max_inc = f64::NEG_INFINITY;
    let losses: Vec<f64> = results
        .into_iter()
        .map(|r| match r {
            Ok((v, inc)) => {
                max_inc = max_inc.max(inc);
                if v.is_finite() {
                    v
                } else {
                    f64::INFINITY
                }
            }
            Err(e) => {
                if matches!(e, Error::NonDescentDetected { .. }) {
                    non_descent += 1;
                }
                f64::INFINITY
            }
        })
        .collect();
    let mut report_cells = Vec::with_capacity(cells.len());
    for (c, p) in cells.iter().enumerate() {
        let fl = &losses[c * k..(c + 1) * k];
        let (mean_loss, se_loss) = mean_se(fl);
        report_cells.push(CvCell {
            lambda_a: p.lambda_a,
            lambda_b: p.lambda_b,
            lambda_n: p.lambda_n,
            mean_loss,
            se_loss,
            failed_folds: fl.iter().filter(|v| !v.is_finite()).count(),
        });
    }
    let mut best: Option<usize> = None;
    for (i, c) in report_cells.iter().enumerate() {
        if !c.mean_loss.is_finite() {
            continue;
        }
        if best.map_or(true, |b| better(c, &report_cells[b])) {
            best = Some(i);
        }
    }
    let b = best.ok_or(Error::AllCellsFailed)?;
    Ok(CvReport {
        selected: cells[b],
        selected_fold_losses: losses[b * k..(b + 1) * k].to_vec(),
        cells: report_cells,
        k_folds: k,
        non_descent_events: non_descent,
        max_sweep_increase: max_inc,
    })
}
