//! Two-block ADMM over the aggregate ellipsoids.
//!
//! Each block step minimizes, exactly over ‖Xa‖ = 1, the first-order model of
//! the profiled objective plus a damping term in the X-metric and the
//! augmented penalty (ρ/2)‖a − z + u‖². The damping is backtracked so the
//! augmented Lagrangian never increases across a primal sweep. After the
//! iterations stop, the support of z is polished to a stationary point.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::{Ellipsoid, Slice};
use crate::error::{Error, Result};
use crate::model::{
    support, AggregationWeights, Dataset, FitResult, Normalization, PenaltyConfig, ProfiledCoefficients, StopReason,
};
use crate::oracle::fd_hessian_with;
use crate::profile::{coefficients_from_scalars, Moments, Scalars};

/// Slack allowed on L_rho across one primal sweep before it counts as an increase.
pub const DESCENT_SLACK: f64 = 1e-8;
/// Increase that aborts a fit with `NonDescentDetected`.
pub const DESCENT_ABORT: f64 = 1e-6;
const SIGMA_MIN: f64 = 1e-10;
const BACKTRACK_TRIES: usize = 80;
/// Work allowed for restricted eigendecompositions in one polish, as Σk³.
/// Thousands of rebuilds at k = 50, two or three near k = 600.
const POLISH_EIGEN_BUDGET: f64 = 5e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub rel_obj_tol: f64,
    pub rel_obj_patience: usize,
    pub restarts: usize,
    pub seed: u64,
    pub hessian_check: bool,
    pub fd_step: f64,
    /// Refine the final support to a stationary point.
    pub polish: bool,
    pub polish_tol: f64,
    pub polish_max_iter: usize,
    /// Projected subgradient norm above which an accepted chain is rejected.
    pub stationarity_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iter: 500,
            eps_pri: 1e-4,
            eps_dual: 1e-4,
            rel_obj_tol: 1e-6,
            rel_obj_patience: 20,
            restarts: 10,
            seed: 0,
            hessian_check: true,
            fd_step: 1e-5,
            polish: true,
            polish_tol: 1e-8,
            polish_max_iter: 5000,
            stationarity_tol: f64::INFINITY,
        }
    }
}

impl SolverOptions {
    /// Cheaper settings for cross-validation fold fits: one chain, no
    /// curvature screen, short polish.
    pub fn for_folds(&self) -> Self {
        SolverOptions { restarts: 1, hessian_check: false, polish_max_iter: self.polish_max_iter.min(300), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iter >= 1
            && self.eps_pri > 0.0
            && self.eps_dual > 0.0
            && self.rel_obj_tol > 0.0
            && self.fd_step > 0.0
            && self.polish_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidOptions(format!("{self:?}")))
        }
    }
}

/// Dataset cross products plus the eigen-factorizations the block steps need.
#[derive(Debug, Clone)]
pub struct Problem {
    pub moments: Moments,
    pub pen: PenaltyConfig,
    ell_x: Ellipsoid,
    ell_m: Ellipsoid,
    tau_face: Option<Slice>,
    smy_rot: DVector<f64>,
}

impl Problem {
    pub fn new(d: &Dataset, pen: &PenaltyConfig) -> Result<Self> {
        Self::from_moments(Moments::new(d), pen)
    }

    pub fn from_moments(moments: Moments, pen: &PenaltyConfig) -> Result<Self> {
        pen.validate()?;
        let ell_x = Ellipsoid::new(&moments.sxx)?;
        let ell_m = Ellipsoid::new(&moments.smm)?;
        let tau_face = Slice::new(&moments.sxx, &moments.sxy, pen.r0);
        let smy_rot = ell_m.rotate(&moments.smy);
        Ok(Problem { moments, pen: *pen, ell_x, ell_m, tau_face, smy_rot })
    }

    /// Same data under another penalty, reusing the moments and eigendecompositions.
    pub fn with_penalty(&self, pen: &PenaltyConfig) -> Result<Self> {
        pen.validate()?;
        let tau_face = if pen.r0 == self.pen.r0 { self.tau_face.clone() } else { Slice::new(&self.moments.sxx, &self.moments.sxy, pen.r0) };
        Ok(Problem { pen: *pen, tau_face, ..self.clone() })
    }

    fn la(&self) -> f64 {
        self.pen.effective_lambda_a()
    }
    fn lb(&self) -> f64 {
        self.pen.effective_lambda_b()
    }

    pub fn phi(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        self.moments.phi(a, b, &self.pen)
    }

    pub fn admissible(&self, a: &DVector<f64>, b: &DVector<f64>) -> bool {
        self.moments.in_region(&self.moments.scalars(a, b), &self.pen)
    }

    pub fn coefficients(&self, a: &DVector<f64>, b: &DVector<f64>) -> ProfiledCoefficients {
        let s = self.moments.scalars(a, b);
        coefficients_from_scalars(s.p, s.r, s.alpha)
    }
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub a: DVector<f64>,
    pub b: DVector<f64>,
    pub z_a: DVector<f64>,
    pub z_b: DVector<f64>,
    pub u_a: DVector<f64>,
    pub u_b: DVector<f64>,
    pub frozen: ProfiledCoefficients,
    pub k: usize,
    /// L_rho after each primal sweep (a, b and z steps).
    pub obj_trace: Vec<f64>,
    /// L_rho at the start of each sweep, after the previous dual step.
    pub sweep_start_trace: Vec<f64>,
    /// ‖a − z_a, b − z_b‖_∞ per iteration.
    pub r_trace: Vec<f64>,
    /// ρ‖z^{k+1} − z^k‖_∞ per iteration.
    pub s_trace: Vec<f64>,
    /// ‖a − z_a‖² + ‖b − z_b‖² per iteration.
    pub delta_trace: Vec<f64>,
    pub sigma_a: f64,
    pub sigma_b: f64,
    stall: usize,
}

impl SolverState {
    pub fn new(prob: &Problem, a: DVector<f64>, b: DVector<f64>) -> Self {
        let frozen = prob.coefficients(&a, &b);
        let sigma = (prob.moments.yy / prob.moments.n as f64).max(1e-6);
        SolverState {
            z_a: a.clone(),
            z_b: b.clone(),
            u_a: DVector::zeros(a.len()),
            u_b: DVector::zeros(b.len()),
            a,
            b,
            frozen,
            k: 0,
            obj_trace: Vec::new(),
            sweep_start_trace: Vec::new(),
            r_trace: Vec::new(),
            s_trace: Vec::new(),
            delta_trace: Vec::new(),
            sigma_a: sigma,
            sigma_b: sigma,
            stall: 0,
        }
    }

    pub fn lagrangian(&self, prob: &Problem) -> f64 {
        lagrangian(prob, &self.a, &self.b, &self.z_a, &self.z_b, &self.u_a, &self.u_b)
    }
}

pub fn lagrangian(
    prob: &Problem,
    a: &DVector<f64>,
    b: &DVector<f64>,
    z_a: &DVector<f64>,
    z_b: &DVector<f64>,
    u_a: &DVector<f64>,
    u_b: &DVector<f64>,
) -> f64 {
    let mo = &prob.moments;
    let s = mo.scalars(a, b);
    mo.smooth(&s, prob.pen.lambda_n)
        + prob.la() * z_a.lp_norm(1)
        + prob.lb() * z_b.lp_norm(1)
        + 0.5 * prob.pen.rho * ((a - z_a + u_a).norm_squared() + (b - z_b + u_b).norm_squared())
}

pub fn soft_threshold(v: &DVector<f64>, kappa: f64) -> DVector<f64> {
    v.map(|x| {
        let m = x.abs() - kappa;
        if m > 0.0 {
            x.signum() * m
        } else {
            0.0
        }
    })
}

/// Starting weights for restart `restart_index`, aggregate-unit and sign-canonical.
pub fn initialize_weights(d: &Dataset, seed: u64, restart_index: usize) -> Result<AggregationWeights> {
    let mo = Moments::new(d);
    let pen = PenaltyConfig::default();
    let (a, b) = initial_point(&mo, &pen, seed, restart_index)?;
    Ok(AggregationWeights { a, b, normalization: Normalization::AggregateUnit })
}

fn deterministic_start(mo: &Moments) -> Result<(DVector<f64>, DVector<f64>)> {
    let scale = mo.sxx.diagonal().amax().sqrt() * mo.yy.sqrt();
    let mut a = mo.sxy.clone();
    if a.amax() <= 1e-12 * scale.max(1e-300) {
        a = DVector::from_element(a.len(), 1.0);
    }
    let na = mo.norm_x(&a);
    if na < 1e-12 {
        return Err(Error::ZeroAggregate);
    }
    a /= na;
    let p = a.dot(&mo.sxy);
    // Mᵀ(Y − x* x*ᵀY)
    let mut b = &mo.smy - mo.sxm.tr_mul(&a) * p;
    if b.amax() <= 1e-12 * scale.max(1e-300) {
        b = DVector::from_element(b.len(), 1.0);
    }
    let nb = mo.norm_m(&b);
    if nb < 1e-12 {
        return Err(Error::ZeroAggregate);
    }
    b /= nb;
    Ok(canonical_pair(mo, a, b))
}

fn canonical_pair(mo: &Moments, mut a: DVector<f64>, mut b: DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    if a.dot(&mo.sxy) < 0.0 {
        a.neg_mut();
    }
    if a.dot(&(&mo.sxm * &b)) < 0.0 {
        b.neg_mut();
    }
    (a, b)
}

pub fn initial_point(mo: &Moments, pen: &PenaltyConfig, seed: u64, restart: usize) -> Result<(DVector<f64>, DVector<f64>)> {
    let (a0, b0) = deterministic_start(mo)?;
    if restart == 0 {
        return Ok((a0, b0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    let (sa, sb) = (a0.norm() / (a0.len() as f64).sqrt(), b0.norm() / (b0.len() as f64).sqrt());
    let mut last = None;
    for _ in 0..100 {
        let na = DVector::from_fn(a0.len(), |_, _| StandardNormal.sample(&mut rng));
        let nb = DVector::from_fn(b0.len(), |_, _| StandardNormal.sample(&mut rng));
        let a = &a0 + na * sa;
        let b = &b0 + nb * sb;
        let Ok((a, b)) = mo.normalize(&a, &b) else { continue };
        let (a, b) = canonical_pair(mo, a, b);
        if mo.in_region(&mo.scalars(&a, &b), pen) {
            return Ok((a, b));
        }
        last = Some((a, b));
    }
    last.ok_or(Error::ZeroAggregate)
}

/// Larger σ only shrinks the step further, so once it is lost in rounding
/// the remaining tries cannot do better than keeping the current block.
fn negligible(cand: &DVector<f64>, cur: &DVector<f64>) -> bool {
    (cand - cur).amax() <= 1e-13 * (1.0 + cur.amax())
}

#[derive(Debug, Clone)]
pub struct BlockStep {
    pub value: DVector<f64>,
    pub sigma: f64,
    pub accepted: bool,
}

/// The a-block update.
pub fn a_update(state: &SolverState, prob: &Problem) -> BlockStep {
    let mo = &prob.moments;
    let rho = prob.pen.rho;
    let base = state.lagrangian(prob);
    let (g, _) = mo.grad(&state.a, &state.b, prob.pen.lambda_n);
    let ga = &mo.sxx * &state.a;
    let target = (&state.z_a - &state.u_a) * rho - g;
    let mut sigma = (state.sigma_a * 0.5).max(SIGMA_MIN);
    for _ in 0..BACKTRACK_TRIES {
        let beta = &target + &ga * sigma;
        let mut cand = prob.ell_x.minimize(rho, &beta);
        if cand.dot(&mo.sxy) < prob.pen.r0 {
            match &prob.tau_face {
                Some(face) => cand = face.minimize(rho, &beta),
                None => {
                    sigma *= 2.0;
                    continue;
                }
            }
        }
        if prob.admissible(&cand, &state.b) {
            let l = lagrangian(prob, &cand, &state.b, &state.z_a, &state.z_b, &state.u_a, &state.u_b);
            if l <= base {
                return BlockStep { value: cand, sigma, accepted: true };
            }
        }
        if negligible(&cand, &state.a) {
            break;
        }
        sigma *= 2.0;
    }
    BlockStep { value: state.a.clone(), sigma: state.sigma_a, accepted: false }
}

/// The b-block update. Backtracking runs in the eigenbasis of Smm, where every
/// quantity the acceptance test needs is a dot product, so a try costs O(q).
pub fn b_update(state: &SolverState, prob: &Problem) -> BlockStep {
    let mo = &prob.moments;
    let ell = &prob.ell_m;
    let rho = prob.pen.rho;
    let (_, g) = mo.grad(&state.a, &state.b, prob.pen.lambda_n);
    let yb = ell.rotate(&state.b);
    let gb = ell.gram_rotated(&yb);
    let w = ell.rotate(&(&state.z_b - &state.u_b));
    let target = &w * rho - ell.rotate(&g);
    let xa = ell.rotate(&mo.sxm.tr_mul(&state.a));
    let p = state.a.dot(&mo.sxy);
    let fixed = prob.la() * state.z_a.lp_norm(1)
        + prob.lb() * state.z_b.lp_norm(1)
        + 0.5 * rho * (&state.a - &state.z_a + &state.u_a).norm_squared();
    let eval = |y: &DVector<f64>| {
        let s = Scalars { p, r: y.dot(&prob.smy_rot), alpha: y.dot(&xa) };
        let l = mo.smooth(&s, prob.pen.lambda_n) + fixed + 0.5 * rho * (y - &w).norm_squared();
        (mo.in_region(&s, &prob.pen), l)
    };
    let base = eval(&yb).1;
    let mut sigma = (state.sigma_b * 0.5).max(SIGMA_MIN);
    for _ in 0..BACKTRACK_TRIES {
        let y = ell.minimize_rotated(rho, &(&target + &gb * sigma));
        let (ok, l) = eval(&y);
        if ok && l <= base {
            return BlockStep { value: ell.unrotate(&y), sigma, accepted: true };
        }
        if negligible(&y, &yb) {
            break;
        }
        sigma *= 2.0;
    }
    BlockStep { value: state.b.clone(), sigma: state.sigma_b, accepted: false }
}

/// Scaled dual ascent u ← u + (a − z); records ‖r‖² bookkeeping only.
pub fn dual_update(state: &mut SolverState) {
    state.u_a += &state.a - &state.z_a;
    state.u_b += &state.b - &state.z_b;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convergence {
    Continue,
    ConvergedResiduals,
    ConvergedObjective,
    MaxIter,
}

pub fn check_convergence(state: &SolverState, opts: &SolverOptions) -> Convergence {
    let (Some(&r), Some(&s)) = (state.r_trace.last(), state.s_trace.last()) else {
        return Convergence::Continue;
    };
    if r <= opts.eps_pri && s <= opts.eps_dual {
        return Convergence::ConvergedResiduals;
    }
    if state.stall >= opts.rel_obj_patience {
        return Convergence::ConvergedObjective;
    }
    if state.k >= opts.max_iter {
        return Convergence::MaxIter;
    }
    Convergence::Continue
}

/// Relative change of the last two trace values.
fn relative_change(trace: &[f64]) -> Option<f64> {
    let n = trace.len();
    if n < 2 {
        return None;
    }
    let (prev, cur) = (trace[n - 2], trace[n - 1]);
    Some((cur - prev).abs() / prev.abs().max(1e-300))
}

/// One full iteration: a, b, z, dual, bookkeeping. Returns the sweep's L_rho increase.
pub fn iterate(state: &mut SolverState, prob: &Problem, opts: &SolverOptions) -> f64 {
    let start = state.lagrangian(prob);
    let step = a_update(state, prob);
    state.a = step.value;
    state.sigma_a = step.sigma;
    let step = b_update(state, prob);
    state.b = step.value;
    state.sigma_b = step.sigma;
    let rho = prob.pen.rho;
    let za_old = std::mem::replace(&mut state.z_a, soft_threshold(&(&state.a + &state.u_a), prob.la() / rho));
    let zb_old = std::mem::replace(&mut state.z_b, soft_threshold(&(&state.b + &state.u_b), prob.lb() / rho));
    let end = state.lagrangian(prob);
    state.sweep_start_trace.push(start);
    state.obj_trace.push(end);
    let ra = &state.a - &state.z_a;
    let rb = &state.b - &state.z_b;
    state.r_trace.push(ra.amax().max(rb.amax()));
    state.delta_trace.push(ra.norm_squared() + rb.norm_squared());
    state.s_trace.push(rho * (&state.z_a - za_old).amax().max((&state.z_b - zb_old).amax()));
    dual_update(state);
    state.frozen = prob.coefficients(&state.a, &state.b);
    state.k += 1;
    match relative_change(&state.obj_trace) {
        Some(c) if c < opts.rel_obj_tol => state.stall += 1,
        _ => state.stall = 0,
    }
    end - start
}

/// Flip a (then b) so that τ̂ > 0 and α̂ ≥ 0.
pub fn canonicalize_signs(
    w: &AggregationWeights,
    c: &ProfiledCoefficients,
    r0: f64,
) -> Result<(AggregationWeights, ProfiledCoefficients)> {
    if c.tau_hat.abs() < r0 {
        return Err(Error::TauBelowFloor(c.tau_hat.abs()));
    }
    let mut w = w.clone();
    let mut c = *c;
    if c.tau_hat < 0.0 {
        w.a.neg_mut();
        c.tau_hat = -c.tau_hat;
        c.alpha_hat = -c.alpha_hat;
        c.gamma_hat = -c.gamma_hat;
    }
    if c.alpha_hat < 0.0 {
        w.b.neg_mut();
        c.alpha_hat = -c.alpha_hat;
        c.eta_hat = -c.eta_hat;
    }
    c.mp_hat = c.alpha_hat * c.eta_hat / c.tau_hat;
    Ok((w, c))
}

/// Whether τ̂ sits on its floor.
fn tau_active(prob: &Problem, a: &DVector<f64>) -> bool {
    a.dot(&prob.moments.sxy) <= prob.pen.r0 * (1.0 + 1e-9)
}

/// min over multipliers of ‖dist(−(g + Nc), λ∂‖·‖₁)‖² for one block.
fn block_kkt_sq(g: &DVector<f64>, x: &DVector<f64>, lambda: f64, normals: &[DVector<f64>]) -> f64 {
    let eval = |c: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..g.len() {
            let mut v = g[i];
            for (k, n) in normals.iter().enumerate() {
                v += c[k] * n[i];
            }
            let e = if x[i] != 0.0 { v + lambda * x[i].signum() } else { (v.abs() - lambda).max(0.0) };
            s += e * e;
        }
        s
    };
    match normals.len() {
        0 => eval(&[]),
        1 => exact_line_min(g, x, lambda, &normals[0]).1,
        _ => {
            // convex in the second multiplier after exact minimization over the first
            let inner = |nu: f64| -> f64 {
                let shifted = g + &normals[1] * nu;
                exact_line_min(&shifted, x, lambda, &normals[0]).1
            };
            let nu0 = least_squares_nu(g, x, lambda, normals);
            let scale = nu0.abs().max(1.0);
            let (mut lo, mut hi) = (nu0 - scale, nu0 + scale);
            while inner(lo) < inner(lo + 1e-3 * scale) && hi - lo < 1e12 * scale {
                lo -= hi - lo;
            }
            while inner(hi) < inner(hi - 1e-3 * scale) && hi - lo < 1e12 * scale {
                hi += hi - lo;
            }
            let phi = 0.5 * (5f64.sqrt() - 1.0);
            let (mut c, mut d) = (hi - phi * (hi - lo), lo + phi * (hi - lo));
            let (mut fc, mut fd) = (inner(c), inner(d));
            for _ in 0..200 {
                if fc < fd {
                    hi = d;
                    d = c;
                    fd = fc;
                    c = hi - phi * (hi - lo);
                    fc = inner(c);
                } else {
                    lo = c;
                    c = d;
                    fc = fd;
                    d = lo + phi * (hi - lo);
                    fd = inner(d);
                }
                if hi - lo < 1e-14 * scale {
                    break;
                }
            }
            fc.min(fd).min(inner(nu0))
        }
    }
}

fn least_squares_nu(g: &DVector<f64>, x: &DVector<f64>, lambda: f64, normals: &[DVector<f64>]) -> f64 {
    let rows: Vec<usize> = (0..g.len()).filter(|&i| x[i] != 0.0).collect();
    if rows.is_empty() {
        return 0.0;
    }
    let a = DMatrix::from_fn(rows.len(), normals.len(), |r, k| normals[k][rows[r]]);
    let t = DVector::from_fn(rows.len(), |r, _| -(g[rows[r]] + lambda * x[rows[r]].signum()));
    a.svd(true, true).solve(&t, 1e-14).map(|c| c[1]).unwrap_or(0.0)
}

/// Exact minimizer of the convex piecewise quadratic μ ↦ Σ e_i(μ)².
fn exact_line_min(g: &DVector<f64>, x: &DVector<f64>, lambda: f64, n: &DVector<f64>) -> (f64, f64) {
    let eval = |mu: f64| -> f64 {
        let mut s = 0.0;
        for i in 0..g.len() {
            let v = g[i] + mu * n[i];
            let e = if x[i] != 0.0 { v + lambda * x[i].signum() } else { (v.abs() - lambda).max(0.0) };
            s += e * e;
        }
        s
    };
    let mut knots: Vec<f64> = Vec::new();
    for i in 0..g.len() {
        if x[i] == 0.0 && n[i] != 0.0 {
            knots.push((lambda - g[i]) / n[i]);
            knots.push((-lambda - g[i]) / n[i]);
        }
    }
    knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut cands = knots.clone();
    // on each piece the function is quadratic; its stationary point is a candidate
    let mut bounds = vec![f64::NEG_INFINITY];
    bounds.extend(knots.iter().cloned());
    bounds.push(f64::INFINITY);
    for w in bounds.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let mid = if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else if lo.is_finite() {
            lo + 1.0
        } else if hi.is_finite() {
            hi - 1.0
        } else {
            0.0
        };
        let (mut aa, mut bb) = (0.0, 0.0);
        for i in 0..g.len() {
            let v = g[i] + mid * n[i];
            let off = if x[i] != 0.0 {
                g[i] + lambda * x[i].signum()
            } else if v > lambda {
                g[i] - lambda
            } else if v < -lambda {
                g[i] + lambda
            } else {
                continue;
            };
            aa += n[i] * n[i];
            bb += n[i] * off;
        }
        if aa > 0.0 {
            let mu = -bb / aa;
            if mu >= lo && mu <= hi {
                cands.push(mu);
            }
        }
    }
    cands.push(0.0);
    let mut best = (0.0, eval(0.0));
    for &c in &cands {
        let v = eval(c);
        if v < best.1 {
            best = (c, v);
        }
    }
    best
}

/// Norm of the projected subgradient of Φ at unit-aggregate (a, b): the
/// distance from −∇F to λ∂‖·‖₁ plus the normal cone of the active constraints.
pub fn stationarity(prob: &Problem, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mo = &prob.moments;
    let (ga, gb) = mo.grad(a, b, prob.pen.lambda_n);
    let mut na = vec![&mo.sxx * a];
    if tau_active(prob, a) {
        na.push(mo.sxy.clone());
    }
    let nb = vec![&mo.smm * b];
    (block_kkt_sq(&ga, a, prob.la(), &na) + block_kkt_sq(&gb, b, prob.lb(), &nb)).sqrt()
}

/// Columns spanning {d : d_i = 0 off `supp`, nᵀd = 0 for each normal}, orthonormal.
fn tangent_basis(dim: usize, supp: &[usize], normals: &[DVector<f64>]) -> DMatrix<f64> {
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    for n in normals {
        let mut v = DVector::from_fn(dim, |i, _| if supp.contains(&i) { n[i] } else { 0.0 });
        for o in &ortho {
            let c = o.dot(&v);
            v -= o * c;
        }
        let nv = v.norm();
        if nv > 1e-12 {
            ortho.push(v / nv);
        }
    }
    let fixed = ortho.len();
    for &i in supp {
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        for _ in 0..2 {
            for o in &ortho {
                let c = o.dot(&v);
                v -= o * c;
            }
        }
        let nv = v.norm();
        if nv > 1e-8 {
            ortho.push(v / nv);
        }
    }
    let cols: Vec<DVector<f64>> = ortho.into_iter().skip(fixed).collect();
    if cols.is_empty() {
        DMatrix::zeros(dim, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HessianScreen {
    pub min_eigenvalue: f64,
    pub is_local_min: bool,
    pub dim: usize,
}

/// Curvature classification of a symmetric matrix.
pub fn screen_hessian(h: &DMatrix<f64>) -> HessianScreen {
    if h.nrows() == 0 {
        return HessianScreen { min_eigenvalue: 0.0, is_local_min: true, dim: 0 };
    }
    let sym = (h + h.transpose()) * 0.5;
    let min = SymmetricEigen::new(sym).eigenvalues.min();
    HessianScreen { min_eigenvalue: min, is_local_min: min >= -1e-6, dim: h.nrows() }
}

/// Finite-difference Hessian of Φ over the tangent space of the constraints
/// and the active support at unit-aggregate (a, b).
pub fn tangent_hessian_check(prob: &Problem, a: &DVector<f64>, b: &DVector<f64>, fd_step: f64) -> HessianScreen {
    let mo = &prob.moments;
    let (sa, sb) = (support(a), support(b));
    let (m, q) = (a.len(), b.len());
    let active = tau_active(prob, a);
    // ∇τ̂ of the ray-constant extension
    let grad_tau = &mo.sxy - &mo.sxx * a * a.dot(&mo.sxy);
    let mut na = vec![&mo.sxx * a];
    if active {
        na.push(grad_tau.clone());
    }
    let ba = tangent_basis(m, &sa, &na);
    let bb = tangent_basis(q, &sb, &[&mo.smm * b]);
    let (da, db) = (ba.ncols(), bb.ncols());
    // multiplier of the active τ̂ constraint
    let nu = if active {
        let (ga, _) = mo.grad(a, b, prob.pen.lambda_n);
        let gl = DVector::from_fn(m, |i, _| if a[i] != 0.0 { ga[i] + prob.la() * a[i].signum() } else { 0.0 });
        let gt = DVector::from_fn(m, |i, _| if a[i] != 0.0 { grad_tau[i] } else { 0.0 });
        -gl.dot(&gt) / gt.norm_squared().max(1e-300)
    } else {
        0.0
    };
    // Gram quantities so each evaluation touching two tangent coordinates is O(m + q)
    let sxx_a = &mo.sxx * a;
    let smm_b = &mo.smm * b;
    let (ga_lin, gb_lin) = (ba.tr_mul(&sxx_a), bb.tr_mul(&smm_b));
    let (ga_quad, gb_quad) = (ba.tr_mul(&(&mo.sxx * &ba)), bb.tr_mul(&(&mo.smm * &bb)));
    let (pa, rb) = (ba.tr_mul(&mo.sxy), bb.tr_mul(&mo.smy));
    let (p0, r0v) = (a.dot(&mo.sxy), b.dot(&mo.smy));
    let (na0, nb0) = (a.dot(&sxx_a), b.dot(&smm_b));
    let sxm_b = &mo.sxm * b;
    let al0 = a.dot(&sxm_b);
    let ca = ba.tr_mul(&sxm_b);
    let cb = bb.tr_mul(&mo.sxm.tr_mul(a));
    let cab = ba.tr_mul(&(&mo.sxm * &bb));
    let f = |moves: &[(usize, f64)]| -> f64 {
        let (mut na2, mut nb2, mut p, mut r, mut al) = (na0, nb0, p0, r0v, al0);
        let mut xa = a.clone();
        let mut xb = b.clone();
        for &(i, d) in moves {
            if i < da {
                na2 += 2.0 * d * ga_lin[i];
                p += d * pa[i];
                al += d * ca[i];
                xa.axpy(d, &ba.column(i), 1.0);
            } else {
                let j = i - da;
                nb2 += 2.0 * d * gb_lin[j];
                r += d * rb[j];
                al += d * cb[j];
                xb.axpy(d, &bb.column(j), 1.0);
            }
        }
        // quadratic terms over all ordered pairs
        for &(i, d) in moves {
            for &(i2, d2) in moves {
                match (i < da, i2 < da) {
                    (true, true) => na2 += d * d2 * ga_quad[(i, i2)],
                    (false, false) => nb2 += d * d2 * gb_quad[(i - da, i2 - da)],
                    (true, false) => al += 0.5 * d * d2 * cab[(i, i2 - da)],
                    (false, true) => al += 0.5 * d * d2 * cab[(i2, i - da)],
                }
            }
        }
        if !(na2 > 0.0 && nb2 > 0.0) {
            return f64::NAN;
        }
        let (na, nb) = (na2.sqrt(), nb2.sqrt());
        let s = crate::profile::Scalars { p: p / na, r: r / nb, alpha: al / (na * nb) };
        crate::profile::smooth_from_scalars(mo.n, mo.yy, &s, prob.pen.lambda_n)
            + prob.la() * xa.lp_norm(1) / na
            + prob.lb() * xb.lp_norm(1) / nb
            + nu * (s.p - prob.pen.r0)
    };
    match fd_hessian_with(da + db, fd_step, f) {
        Ok(h) => screen_hessian(&h),
        Err(_) => HessianScreen { min_eigenvalue: f64::NAN, is_local_min: false, dim: da + db },
    }
}

/// Restricted ellipsoid for a support.
/// Gram matrix and ellipsoid restricted to a support, with the τ face built on first use.
struct Restricted {
    supp: Vec<usize>,
    sub: DMatrix<f64>,
    ell: Ellipsoid,
    face: Option<Option<Slice>>,
}

fn restricted(g: &DMatrix<f64>, supp: &[usize]) -> Option<Restricted> {
    if supp.is_empty() {
        return None;
    }
    let sub = g.select_rows(supp).select_columns(supp);
    let ell = Ellipsoid::new(&sub).ok()?;
    Some(Restricted { supp: supp.to_vec(), sub, ell, face: None })
}

fn scatter(dim: usize, supp: &[usize], v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(dim);
    for (k, &i) in supp.iter().enumerate() {
        out[i] = v[k];
    }
    out
}

/// Drop coordinates whose sign flipped relative to `reference`.
fn prune_flips(cand: &mut DVector<f64>, reference: &DVector<f64>) -> bool {
    let mut changed = false;
    for i in 0..cand.len() {
        if cand[i] != 0.0 && cand[i].signum() != reference[i].signum() {
            cand[i] = 0.0;
            changed = true;
        }
    }
    changed
}

/// One damped gradient step on the support of `x` (either block).
#[allow(clippy::too_many_arguments)]
fn polish_block(
    prob: &Problem,
    x: &DVector<f64>,
    grad: &DVector<f64>,
    lambda: f64,
    g: &DMatrix<f64>,
    cache: &mut Option<Restricted>,
    budget: &mut f64,
    sigma: &mut f64,
    tau_face: Option<&DVector<f64>>,
    eval: &dyn Fn(&DVector<f64>) -> Option<f64>,
) -> Option<DVector<f64>> {
    let supp = support(x);
    if cache.as_ref().map(|c| c.supp != supp).unwrap_or(true) {
        let cost = (supp.len() as f64).powi(3);
        if cost > *budget {
            return None;
        }
        *budget -= cost;
        *cache = restricted(g, &supp);
    }
    let Restricted { sub, ell, face, .. } = cache.as_mut()?;
    let (sub, ell) = (&*sub, &*ell);
    let base = eval(x)?;
    let xs = x.select_rows(&supp);
    let gs = DVector::from_fn(supp.len(), |k, _| grad[supp[k]] + lambda * x[supp[k]].signum());
    let gx = sub * &xs;
    // a support wider than the rank leaves the linear model unbounded along the
    // null space of G; a Euclidean proximal term keeps the step finite there
    let eps = if ell.dim() < supp.len() { sub.trace() / supp.len() as f64 } else { 0.0 };
    let mut s = (*sigma * 0.5).max(SIGMA_MIN);
    for _ in 0..BACKTRACK_TRIES {
        let rho = eps * s;
        let beta = &gx * s - &gs + &xs * rho;
        let mut cand_s = ell.minimize(rho, &beta);
        if let Some(h) = tau_face {
            let hs = h.select_rows(&supp);
            if cand_s.dot(&hs) < prob.pen.r0 {
                match face.get_or_insert_with(|| Slice::new(sub, &hs, prob.pen.r0)) {
                    Some(f) => cand_s = f.minimize(rho, &beta),
                    None => {
                        s *= 2.0;
                        continue;
                    }
                }
            }
        }
        let mut cand = scatter(x.len(), &supp, &cand_s);
        if prune_flips(&mut cand, x) {
            let nrm = cand.dot(&(g * &cand)).max(0.0).sqrt();
            if nrm < 1e-12 {
                s *= 2.0;
                continue;
            }
            cand /= nrm;
        }
        if let Some(v) = eval(&cand) {
            if v <= base {
                *sigma = s;
                return Some(cand);
            }
        }
        s *= 2.0;
    }
    None
}

/// Proximal step on the full block: soft-threshold a projected-gradient move,
/// retract onto xᵀGx = 1 and keep it only when Φ strictly drops.
fn activation_step(
    x: &DVector<f64>,
    grad: &DVector<f64>,
    lambda: f64,
    g: &DMatrix<f64>,
    eval: &dyn Fn(&DVector<f64>) -> Option<f64>,
) -> Option<DVector<f64>> {
    let base = eval(x)?;
    let normal = g * x;
    let supp = support(x);
    // multiplier fitted on the support so the move is tangent there
    let den: f64 = supp.iter().map(|&i| normal[i] * normal[i]).sum();
    let num: f64 = supp.iter().map(|&i| -(grad[i] + lambda * x[i].signum()) * normal[i]).sum();
    let mu = if den > 0.0 { num / den } else { 0.0 };
    let d = grad + &normal * mu;
    let mut t = x.amax() / d.amax().max(1e-300);
    for _ in 0..60 {
        let cand = soft_threshold(&(x - &d * t), lambda * t);
        let nrm = cand.dot(&(g * &cand)).max(0.0).sqrt();
        if nrm > 1e-12 {
            let cand = cand / nrm;
            if let Some(v) = eval(&cand) {
                if v < base {
                    return Some(cand);
                }
            }
        }
        t *= 0.5;
    }
    None
}

/// Support-restricted descent to a stationary point; Φ never increases.
pub fn polish(prob: &Problem, a: DVector<f64>, b: DVector<f64>, opts: &SolverOptions) -> (DVector<f64>, DVector<f64>, usize) {
    let mo = &prob.moments;
    let (mut a, mut b) = (a, b);
    let mut sig_a = (mo.yy / mo.n as f64).max(1e-6);
    let mut sig_b = sig_a;
    let (mut cache_a, mut cache_b) = (None, None);
    // eigendecompositions of restricted Gram matrices, in units of k³
    let mut budget = POLISH_EIGEN_BUDGET;
    let mut it = 0;
    while it < opts.polish_max_iter {
        if it % 5 == 0 && stationarity(prob, &a, &b) <= opts.polish_tol {
            break;
        }
        it += 1;
        let (ga, _) = mo.grad(&a, &b, prob.pen.lambda_n);
        let eval_a = |c: &DVector<f64>| prob.admissible(c, &b).then(|| prob.phi(c, &b));
        let next_a = polish_block(prob, &a, &ga, prob.la(), &mo.sxx, &mut cache_a, &mut budget, &mut sig_a, Some(&mo.sxy), &eval_a);
        let moved_a = next_a.as_ref().map(|v| (v - &a).amax()).unwrap_or(0.0);
        if let Some(v) = next_a {
            a = v;
        }
        let (_, gb) = mo.grad(&a, &b, prob.pen.lambda_n);
        let eval_b = |c: &DVector<f64>| prob.admissible(&a, c).then(|| prob.phi(&a, c));
        let next_b = polish_block(prob, &b, &gb, prob.lb(), &mo.smm, &mut cache_b, &mut budget, &mut sig_b, None, &eval_b);
        let moved_b = next_b.as_ref().map(|v| (v - &b).amax()).unwrap_or(0.0);
        if let Some(v) = next_b {
            b = v;
        }
        let stalled = moved_a == 0.0 && moved_b == 0.0;
        if stalled || it % 25 == 0 {
            // the restricted steps cannot open coordinates; try a prox step on each block
            let mut opened = false;
            if stationarity(prob, &a, &b) > opts.polish_tol {
                let (ga, _) = mo.grad(&a, &b, prob.pen.lambda_n);
                let eval_a = |c: &DVector<f64>| prob.admissible(c, &b).then(|| prob.phi(c, &b));
                if let Some(v) = activation_step(&a, &ga, prob.la(), &mo.sxx, &eval_a) {
                    a = v;
                    opened = true;
                }
                let (_, gb) = mo.grad(&a, &b, prob.pen.lambda_n);
                let eval_b = |c: &DVector<f64>| prob.admissible(&a, c).then(|| prob.phi(&a, c));
                if let Some(v) = activation_step(&b, &gb, prob.lb(), &mo.smm, &eval_b) {
                    b = v;
                    opened = true;
                }
            }
            if stalled && !opened {
                break;
            }
        }
    }
    (a, b, it)
}

/// Outcome of one restart chain.
#[derive(Debug, Clone)]
pub struct ChainOutcome {
    pub restart: usize,
    pub state: SolverState,
    pub stop: StopReason,
    pub max_sweep_increase: f64,
    /// Final (a, b) after thresholding, normalization and polishing.
    pub weights: Option<(DVector<f64>, DVector<f64>)>,
    pub objective: f64,
    pub stationarity: f64,
    pub hessian: Option<HessianScreen>,
    pub accepted: bool,
}

pub fn run_chain(prob: &Problem, a0: DVector<f64>, b0: DVector<f64>, opts: &SolverOptions, restart: usize) -> Result<ChainOutcome> {
    let mut state = SolverState::new(prob, a0, b0);
    let mut max_inc = f64::NEG_INFINITY;
    let stop = loop {
        let inc = iterate(&mut state, prob, opts);
        max_inc = max_inc.max(inc);
        if inc > DESCENT_ABORT {
            return Err(Error::NonDescentDetected { iteration: state.k, increase: inc });
        }
        match check_convergence(&state, opts) {
            Convergence::Continue => {}
            Convergence::ConvergedResiduals => break StopReason::ConvergedResiduals,
            Convergence::ConvergedObjective => break StopReason::ConvergedObjective,
            Convergence::MaxIter => break StopReason::MaxIter,
        }
    };
    let mut out = ChainOutcome {
        restart,
        state,
        stop,
        max_sweep_increase: max_inc,
        weights: None,
        objective: f64::INFINITY,
        stationarity: f64::INFINITY,
        hessian: None,
        accepted: false,
    };
    let mo = &prob.moments;
    let Ok((a, b)) = mo.normalize(&out.state.z_a, &out.state.z_b) else { return Ok(out) };
    if !prob.admissible(&a, &b) {
        return Ok(out);
    }
    let (a, b) = if opts.polish {
        let (a, b, _) = polish(prob, a, b, opts);
        (a, b)
    } else {
        (a, b)
    };
    out.objective = prob.phi(&a, &b);
    out.stationarity = stationarity(prob, &a, &b);
    let screen = opts.hessian_check.then(|| tangent_hessian_check(prob, &a, &b, opts.fd_step));
    out.accepted = screen.map(|s| s.is_local_min).unwrap_or(true) && out.stationarity <= opts.stationarity_tol;
    out.hessian = screen;
    out.weights = Some((a, b));
    Ok(out)
}

/// All restart chains, in restart order.
pub fn run_chains(prob: &Problem, opts: &SolverOptions) -> Result<Vec<ChainOutcome>> {
    opts.validate()?;
    let chains = opts.restarts.max(1);
    (0..chains)
        .into_par_iter()
        .map(|r| {
            let (a0, b0) = initial_point(&prob.moments, &prob.pen, opts.seed, r)?;
            run_chain(prob, a0, b0, opts, r)
        })
        .collect()
}

/// Lowest-objective accepted chain, ties to the lowest restart index.
pub fn select_chain(chains: &[ChainOutcome]) -> Option<&ChainOutcome> {
    chains
        .iter()
        .filter(|c| c.accepted)
        .fold(None, |best: Option<&ChainOutcome>, c| match best {
            Some(b) if b.objective <= c.objective => Some(b),
            _ => Some(c),
        })
}

pub fn fit(d: &Dataset, pen: &PenaltyConfig, opts: &SolverOptions) -> Result<FitResult> {
    let prob = Problem::new(d, pen)?;
    fit_problem(&prob, opts)
}

pub fn fit_problem(prob: &Problem, opts: &SolverOptions) -> Result<FitResult> {
    let chains = run_chains(prob, opts)?;
    let best = select_chain(&chains).ok_or(Error::NoAdmissibleSolution { restarts: chains.len() })?;
    let (a, b) = best.weights.clone().expect("accepted chain has weights");
    let coef = prob.coefficients(&a, &b);
    let w = AggregationWeights { a, b, normalization: Normalization::AggregateUnit };
    let (w, coef) = canonicalize_signs(&w, &coef, prob.pen.r0)?;
    let st = &best.state;
    let r = *st.r_trace.last().unwrap_or(&f64::NAN);
    let s = *st.s_trace.last().unwrap_or(&f64::NAN);
    let screen = best.hessian;
    Ok(FitResult {
        support_a: support(&w.a),
        support_b: support(&w.b),
        weights: w,
        coefficients: coef,
        objective: best.objective,
        iterations: st.k,
        converged: best.stop == StopReason::ConvergedResiduals,
        stop_reason: best.stop,
        primal_residual_final: r,
        dual_residual_final: s,
        restarts_used: chains.len(),
        is_local_min: screen.map(|h| h.is_local_min).unwrap_or(true),
        min_hessian_eigenvalue: screen.map(|h| h.min_eigenvalue).unwrap_or(f64::NAN),
        stationarity: best.stationarity,
        max_sweep_increase: chains.iter().map(|c| c.max_sweep_increase).fold(f64::NEG_INFINITY, f64::max),
        chosen_restart: best.restart,
        restart_objectives: chains.iter().map(|c| c.accepted.then_some(c.objective)).collect(),
    })
}
