//! Independent verifiers: exhaustive minimization on tiny instances, finite
//! differences, and identification of the aggregation directions from moments.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AggregationWeights, Dataset, Normalization, PenaltyConfig};
use crate::profile::Moments;

pub fn finite_diff_grad<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteEvaluation);
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference Hessian.
pub fn fd_hessian<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>> {
    fd_hessian_with(x.len(), h, |moves| {
        let mut y = x.clone();
        for &(i, d) in moves {
            y[i] += d;
        }
        f(&y)
    })
}

/// Central-difference Hessian where `f` receives the displaced coordinates
/// (index, offset) from the base point instead of a full vector, so callers
/// can evaluate cheaply. An index may appear twice.
pub fn fd_hessian_with<F: Fn(&[(usize, f64)]) -> f64>(k: usize, h: f64, f: F) -> Result<DMatrix<f64>> {
    let mut hm = DMatrix::zeros(k, k);
    let at = |di: usize, si: f64, dj: usize, sj: f64| -> f64 { f(&[(di, si * h), (dj, sj * h)]) };
    let f0 = f(&[]);
    if !f0.is_finite() {
        return Err(Error::NonFiniteEvaluation);
    }
    for i in 0..k {
        let (p, m) = (at(i, 1.0, i, 1.0), at(i, -1.0, i, -1.0));
        if !p.is_finite() || !m.is_finite() {
            return Err(Error::NonFiniteEvaluation);
        }
        hm[(i, i)] = (p - 2.0 * f0 + m) / (4.0 * h * h);
        for j in 0..i {
            let v = [at(i, 1.0, j, 1.0), at(i, 1.0, j, -1.0), at(i, -1.0, j, 1.0), at(i, -1.0, j, -1.0)];
            if v.iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFiniteEvaluation);
            }
            let e = (v[0] - v[1] - v[2] + v[3]) / (4.0 * h * h);
            hm[(i, j)] = e;
            hm[(j, i)] = e;
        }
    }
    Ok(hm)
}

/// Points of the aggregate-unit ellipse (or the two signs when the side has one column).
fn ring(s: &DMatrix<f64>, resolution: usize) -> Vec<DVector<f64>> {
    match s.nrows() {
        1 => {
            let v = 1.0 / s[(0, 0)].sqrt();
            vec![DVector::from_vec(vec![v]), DVector::from_vec(vec![-v])]
        }
        _ => {
            let e = SymmetricEigen::new(s.clone());
            let root = &e.eigenvectors * DMatrix::from_diagonal(&e.eigenvalues.map(|l| 1.0 / l.sqrt())) * e.eigenvectors.transpose();
            (0..resolution)
                .map(|i| {
                    let th = i as f64 * std::f64::consts::TAU / resolution as f64;
                    &root * DVector::from_vec(vec![th.cos(), th.sin()])
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridMinimum {
    pub weights: AggregationWeights,
    pub objective: f64,
}

/// Exhaustive minimum of Φ over an angular grid when m, q ≤ 2.
pub fn grid_search_min(d: &Dataset, p: &PenaltyConfig, resolution: usize) -> Result<GridMinimum> {
    if d.n_exposures() > 2 || d.n_mediators() > 2 {
        return Err(Error::DimensionMismatch("grid oracle needs m, q <= 2".into()));
    }
    let mo = Moments::new(d);
    let ra = ring(&mo.sxx, resolution);
    let rb = ring(&mo.smm, resolution);
    let best = ra
        .par_iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let mut best: Option<(f64, usize, usize)> = None;
            for (j, b) in rb.iter().enumerate() {
                if !mo.in_region(&mo.scalars(a, b), p) {
                    continue;
                }
                let v = mo.phi(a, b, p);
                if best.map(|t| v < t.0).unwrap_or(true) {
                    best = Some((v, i, j));
                }
            }
            best
        })
        .reduce_with(|x, y| if y.0 < x.0 || (y.0 == x.0 && (y.1, y.2) < (x.1, x.2)) { y } else { x })
        .ok_or(Error::InfeasibleEverywhere)?;
    Ok(GridMinimum {
        weights: AggregationWeights { a: ra[best.1].clone(), b: rb[best.2].clone(), normalization: Normalization::AggregateUnit },
        objective: best.0,
    })
}

/// Scalars identified alongside the directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentifiedScalars {
    pub alpha_zero: bool,
    /// τ₀‖a₀‖ (γ₀‖a₀‖ when α₀ = 0).
    pub tau_norm_a: f64,
    /// η₀‖b₀‖.
    pub eta_norm_b: f64,
    /// |α₀|‖a₀‖/‖b₀‖.
    pub alpha_ratio: f64,
    /// (γ₀/α₀)‖b₀‖; zero when α₀ = 0.
    pub gamma_over_alpha_norm_b: f64,
}

#[derive(Debug, Clone)]
pub struct Identification {
    pub a_dir: DVector<f64>,
    pub b_dir: DVector<f64>,
    pub scalars: IdentifiedScalars,
    /// Relative Frobenius distance of Sxx⁻¹Sxm from its best rank-one approximation.
    pub rank_one_residual: f64,
}

/// Constructive recovery of (â₀, b̂₀) and scalar products from second moments.
pub fn identify_from_moments(
    sxm: &DMatrix<f64>,
    sxy: &DVector<f64>,
    smy: &DVector<f64>,
    sxx: &DMatrix<f64>,
    smm: &DMatrix<f64>,
    rank_tol: f64,
    r0: f64,
) -> Result<Identification> {
    let cx = sxx.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let cm = smm.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let t = cx.solve(sxy);
    let scale = sxx.norm().sqrt() * smm.norm().sqrt();
    if sxm.norm() <= 1e-12 * scale {
        let v = cm.solve(smy);
        if t.norm() < r0 {
            return Err(Error::DegenerateTau);
        }
        // sign(η) = sign(γ) with γ > 0
        let (ta, eta) = (t.norm(), v.norm());
        return Ok(Identification {
            a_dir: &t / ta,
            b_dir: &v / eta,
            scalars: IdentifiedScalars {
                alpha_zero: true,
                tau_norm_a: ta,
                eta_norm_b: eta,
                alpha_ratio: 0.0,
                gamma_over_alpha_norm_b: 0.0,
            },
            rank_one_residual: 0.0,
        });
    }
    let bmat = cx.solve(sxm);
    let kappa2 = bmat.norm_squared();
    let svd = bmat.clone().svd(false, false);
    let s1 = svd.singular_values.max();
    let resid = ((kappa2 - s1 * s1).max(0.0)).sqrt() / kappa2.sqrt();
    if resid > rank_tol {
        return Err(Error::RankOneViolation(resid));
    }
    let ta = t.norm();
    if ta < r0 {
        return Err(Error::DegenerateTau);
    }
    let a_dir = &t / ta;
    let u = bmat.tr_mul(&t);
    let b_dir = &u / u.norm();
    let tau_over_alpha_nb = u.norm() / kappa2;
    let lhs = b_dir.dot(smy) - tau_over_alpha_nb * kappa2 * a_dir.dot(&(sxx * &a_dir));
    let curly = b_dir.dot(&(smm * &b_dir)) - kappa2 * a_dir.dot(&(sxx * &a_dir));
    let eta_nb = lhs / curly;
    Ok(Identification {
        a_dir,
        b_dir,
        scalars: IdentifiedScalars {
            alpha_zero: false,
            tau_norm_a: ta,
            eta_norm_b: eta_nb,
            alpha_ratio: kappa2.sqrt(),
            gamma_over_alpha_norm_b: tau_over_alpha_nb - eta_nb,
        },
        rank_one_residual: resid,
    })
}

/// Angle between two directions after the best sign alignment.
pub fn angular_error(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let u = u / u.norm();
    let mut v = v / v.norm();
    if u.dot(&v) < 0.0 {
        v.neg_mut();
    }
    // acos loses half the digits near zero; this form does not
    2.0 * (&u - &v).norm().atan2((&u + &v).norm())
}
