//! Closed-form profiled coefficients, SSR terms and the penalized objective.
//!
//! Everything the solver touches goes through [`Moments`], the cross-product
//! summary of a dataset, so the per-iteration cost does not depend on n.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{AggregationWeights, Dataset, Normalization, PenaltyConfig, ProfiledCoefficients, ZERO_SD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveBreakdown {
    pub ssr_y_x: f64,
    pub ssr_m_x: f64,
    pub ssr_y_xm: f64,
    pub mp_term: f64,
    pub l1_a: f64,
    pub l1_b: f64,
    pub total: f64,
}

/// Unit aggregates x*, m* (and the weights rescaled to match).
pub fn compute_aggregates(d: &Dataset, w: &AggregationWeights) -> Result<(DVector<f64>, DVector<f64>, AggregationWeights)> {
    let xs = &d.x * &w.a;
    let ms = &d.m * &w.b;
    let (nx, nm) = (xs.norm(), ms.norm());
    if nx < ZERO_SD || nm < ZERO_SD {
        return Err(Error::ZeroAggregate);
    }
    let w = AggregationWeights { a: &w.a / nx, b: &w.b / nm, normalization: Normalization::AggregateUnit };
    Ok((xs / nx, ms / nm, w))
}

/// Coefficients from the scalars p = x*ᵀY, r = m*ᵀY, α = x*ᵀm* of unit aggregates.
pub fn coefficients_from_scalars(p: f64, r: f64, alpha: f64) -> ProfiledCoefficients {
    let w = 1.0 / (1.0 - alpha * alpha);
    let gamma = (p - alpha * r) * w;
    let eta = (r - alpha * p) * w;
    ProfiledCoefficients { tau_hat: p, alpha_hat: alpha, gamma_hat: gamma, eta_hat: eta, mp_hat: alpha * eta / p }
}

fn check_region(p: f64, alpha: f64, pen: &PenaltyConfig) -> Result<()> {
    let gap = 1.0 - alpha * alpha;
    if gap < pen.delta {
        return Err(Error::CollinearAggregates(gap));
    }
    if p.abs() < pen.r0 {
        return Err(Error::TauBelowFloor(p.abs()));
    }
    Ok(())
}

pub fn profile_coefficients(
    x_star: &DVector<f64>,
    m_star: &DVector<f64>,
    y: &DVector<f64>,
    pen: &PenaltyConfig,
) -> Result<ProfiledCoefficients> {
    let alpha = x_star.dot(m_star);
    let p = x_star.dot(y);
    let r = m_star.dot(y);
    check_region(p, alpha, pen)?;
    Ok(coefficients_from_scalars(p, r, alpha))
}

pub fn mediation_proportion(c: &ProfiledCoefficients, r0: f64) -> Result<f64> {
    if c.tau_hat.abs() < r0 {
        return Err(Error::TauBelowFloor(c.tau_hat.abs()));
    }
    Ok(c.alpha_hat * c.eta_hat / c.tau_hat)
}

/// Φ and its terms, evaluated directly on the n-vectors.
pub fn objective_value(d: &Dataset, w: &AggregationWeights, pen: &PenaltyConfig) -> Result<ObjectiveBreakdown> {
    let (xs, ms, w) = compute_aggregates(d, w)?;
    let c = profile_coefficients(&xs, &ms, &d.y, pen)?;
    let ssr_y_x = (&d.y - &xs * c.tau_hat).norm_squared();
    let ssr_m_x = (&ms - &xs * c.alpha_hat).norm_squared();
    let ssr_y_xm = (&d.y - &xs * c.gamma_hat - &ms * c.eta_hat).norm_squared();
    let n = d.n() as f64;
    let mp_term = pen.lambda_n * c.mp_hat;
    let l1_a = pen.effective_lambda_a() * w.a.lp_norm(1);
    let l1_b = pen.effective_lambda_b() * w.b.lp_norm(1);
    let vif = 1.0 / (1.0 - c.alpha_hat * c.alpha_hat);
    let total = (ssr_y_x + ssr_m_x + ssr_y_xm * vif) / (2.0 * n) - mp_term + l1_a + l1_b;
    Ok(ObjectiveBreakdown { ssr_y_x, ssr_m_x, ssr_y_xm, mp_term, l1_a, l1_b, total })
}

/// Cross products of a dataset.
#[derive(Debug, Clone)]
pub struct Moments {
    pub n: usize,
    pub sxx: DMatrix<f64>,
    pub smm: DMatrix<f64>,
    pub sxm: DMatrix<f64>,
    pub sxy: DVector<f64>,
    pub smy: DVector<f64>,
    pub yy: f64,
}

/// Scalars of a unit-aggregate configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scalars {
    pub p: f64,
    pub r: f64,
    pub alpha: f64,
}

impl Moments {
    pub fn new(d: &Dataset) -> Self {
        let xt = d.x.transpose();
        let mt = d.m.transpose();
        Moments {
            n: d.n(),
            sxx: &xt * &d.x,
            smm: &mt * &d.m,
            sxm: &xt * &d.m,
            sxy: &xt * &d.y,
            smy: &mt * &d.y,
            yy: d.y.norm_squared(),
        }
    }

    pub fn norm_x(&self, a: &DVector<f64>) -> f64 {
        a.dot(&(&self.sxx * a)).max(0.0).sqrt()
    }
    pub fn norm_m(&self, b: &DVector<f64>) -> f64 {
        b.dot(&(&self.smm * b)).max(0.0).sqrt()
    }

    /// Rescale to ‖Xa‖ = ‖Mb‖ = 1.
    pub fn normalize(&self, a: &DVector<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (na, nb) = (self.norm_x(a), self.norm_m(b));
        if na < ZERO_SD || nb < ZERO_SD {
            return Err(Error::ZeroAggregate);
        }
        Ok((a / na, b / nb))
    }

    /// Scalars at unit-aggregate (a, b).
    pub fn scalars(&self, a: &DVector<f64>, b: &DVector<f64>) -> Scalars {
        Scalars { p: a.dot(&self.sxy), r: b.dot(&self.smy), alpha: a.dot(&(&self.sxm * b)) }
    }

    pub fn in_region(&self, s: &Scalars, pen: &PenaltyConfig) -> bool {
        s.p >= pen.r0 && 1.0 - s.alpha * s.alpha >= pen.delta
    }

    /// Φ breakdown for unit-aggregate (a, b) from cross products.
    pub fn breakdown(&self, a: &DVector<f64>, b: &DVector<f64>, pen: &PenaltyConfig) -> ObjectiveBreakdown {
        let s = self.scalars(a, b);
        breakdown_from_scalars(self.n, self.yy, s, pen, a.lp_norm(1), b.lp_norm(1))
    }

    /// Smooth part F (SSR terms and MP reward) at unit aggregates.
    pub fn smooth(&self, s: &Scalars, lambda_n: f64) -> f64 {
        smooth_from_scalars(self.n, self.yy, s, lambda_n)
    }

    /// Φ at unit aggregates.
    pub fn phi(&self, a: &DVector<f64>, b: &DVector<f64>, pen: &PenaltyConfig) -> f64 {
        let s = self.scalars(a, b);
        self.smooth(&s, pen.lambda_n) + pen.effective_lambda_a() * a.lp_norm(1) + pen.effective_lambda_b() * b.lp_norm(1)
    }

    /// Φ of arbitrary nonzero (a, b), normalizing first.
    pub fn phi_any(&self, a: &DVector<f64>, b: &DVector<f64>, pen: &PenaltyConfig) -> Result<f64> {
        let (a, b) = self.normalize(a, b)?;
        Ok(self.phi(&a, &b, pen))
    }

    /// Euclidean gradient of the smooth part, extended to be constant along
    /// rays, at unit-aggregate (a, b).
    pub fn grad(&self, a: &DVector<f64>, b: &DVector<f64>, lambda_n: f64) -> (DVector<f64>, DVector<f64>) {
        let s = self.scalars(a, b);
        let (fp, fr, fal) = partials(self.n, self.yy, &s, lambda_n);
        let ga_x = &self.sxx * a;
        let gb_m = &self.smm * b;
        let sxm_b = &self.sxm * b;
        let sxm_t_a = self.sxm.tr_mul(a);
        let ga = (&self.sxy - &ga_x * s.p) * fp + (sxm_b - &ga_x * s.alpha) * fal;
        let gb = (&self.smy - &gb_m * s.r) * fr + (sxm_t_a - &gb_m * s.alpha) * fal;
        (ga, gb)
    }
}

pub fn smooth_from_scalars(n: usize, yy: f64, s: &Scalars, lambda_n: f64) -> f64 {
    let Scalars { p, r, alpha } = *s;
    let w = 1.0 / (1.0 - alpha * alpha);
    let ssr3 = yy - (p * p + r * r - 2.0 * alpha * p * r) * w;
    let eta = (r - alpha * p) * w;
    (yy - p * p + 1.0 - alpha * alpha + ssr3 * w) / (2.0 * n as f64) - lambda_n * alpha * eta / p
}

pub fn breakdown_from_scalars(n: usize, yy: f64, s: Scalars, pen: &PenaltyConfig, l1a: f64, l1b: f64) -> ObjectiveBreakdown {
    let Scalars { p, r, alpha } = s;
    let c = coefficients_from_scalars(p, r, alpha);
    let w = 1.0 / (1.0 - alpha * alpha);
    let ssr_y_x = (yy - p * p).max(0.0);
    let ssr_m_x = 1.0 - alpha * alpha;
    let ssr_y_xm = (yy - (p * p + r * r - 2.0 * alpha * p * r) * w).max(0.0);
    let mp_term = pen.lambda_n * c.mp_hat;
    let l1_a = pen.effective_lambda_a() * l1a;
    let l1_b = pen.effective_lambda_b() * l1b;
    let total = (ssr_y_x + ssr_m_x + ssr_y_xm * w) / (2.0 * n as f64) - mp_term + l1_a + l1_b;
    ObjectiveBreakdown { ssr_y_x, ssr_m_x, ssr_y_xm, mp_term, l1_a, l1_b, total }
}

/// ∂F/∂p, ∂F/∂r, ∂F/∂α.
pub fn partials(n: usize, yy: f64, s: &Scalars, lambda_n: f64) -> (f64, f64, f64) {
    let Scalars { p, r, alpha: al } = *s;
    let n2 = 2.0 * n as f64;
    let w = 1.0 / (1.0 - al * al);
    let q = p * p + r * r - 2.0 * al * p * r;
    let fp = (-2.0 * p - w * w * (2.0 * p - 2.0 * al * r)) / n2 - lambda_n * (-al * al * w / p - al * (r - al * p) * w / (p * p));
    let fr = (-w * w * (2.0 * r - 2.0 * al * p)) / n2 - lambda_n * (al * w / p);
    let dw = 2.0 * al * w * w;
    let fal = (-2.0 * al + dw * yy - 2.0 * w * dw * q + w * w * 2.0 * p * r) / n2
        - lambda_n * ((r - 2.0 * al * p) * w / p + al * (r - al * p) * dw / p);
    (fp, fr, fal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::validate_dataset;

    fn toy(n: usize, m: usize, q: usize, seed: u64) -> Dataset {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let x = DMatrix::from_fn(n, m, |_, _| next());
        let mm = DMatrix::from_fn(n, q, |i, j| x[(i, j % m)] * 0.7 + next());
        let y = DVector::from_fn(n, |i, _| mm[(i, 0)] + 0.3 * x[(i, 0)] + next());
        crate::model::standardize_columns(&validate_dataset(x, mm, y).unwrap()).unwrap()
    }

    #[test]
    fn orthogonal_design() {
        let xs = DVector::from_vec(vec![1.0, 0.0]);
        let ms = DVector::from_vec(vec![0.0, 1.0]);
        let y = DVector::from_vec(vec![2.0, 3.0]);
        let c = profile_coefficients(&xs, &ms, &y, &PenaltyConfig::default()).unwrap();
        assert_eq!((c.alpha_hat, c.tau_hat, c.gamma_hat, c.eta_hat, c.mp_hat), (0.0, 2.0, 2.0, 3.0, 0.0));
    }

    #[test]
    fn pure_mediator_outcome_hits_tau_floor() {
        let xs = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let ms = DVector::from_vec(vec![0.0, 1.0, 0.0]);
        let y = &ms * 2.5;
        let r = profile_coefficients(&xs, &ms, &y, &PenaltyConfig::default());
        assert!(matches!(r, Err(Error::TauBelowFloor(_))));
    }

    #[test]
    fn collinear_rejected() {
        let xs = DVector::from_vec(vec![1.0, 0.0]);
        let ms = DVector::from_vec(vec![0.999, (1.0f64 - 0.999 * 0.999).sqrt()]);
        let r = profile_coefficients(&xs, &ms, &DVector::from_vec(vec![1.0, 1.0]), &PenaltyConfig::default());
        assert!(matches!(r, Err(Error::CollinearAggregates(_))));
    }

    #[test]
    fn mp_identity_cases() {
        let c = ProfiledCoefficients { tau_hat: 0.6, alpha_hat: 0.5, gamma_hat: 0.0, eta_hat: 1.2, mp_hat: 1.0 };
        assert!((mediation_proportion(&c, 1e-3).unwrap() - 1.0).abs() < 1e-15);
        let c = ProfiledCoefficients { alpha_hat: 0.0, ..c };
        assert_eq!(mediation_proportion(&c, 1e-3).unwrap(), 0.0);
    }

    #[test]
    fn basis_aggregate_is_scaled_column() {
        let d = toy(30, 3, 2, 1);
        let w = AggregationWeights {
            a: DVector::from_vec(vec![1.0, 0.0, 0.0]),
            b: DVector::from_vec(vec![0.0, 1.0]),
            normalization: Normalization::AggregateUnit,
        };
        let (xs, _, _) = compute_aggregates(&d, &w).unwrap();
        let col = d.x.column(0);
        assert!((xs - col / col.norm()).amax() < 1e-14);
    }

    #[test]
    fn null_direction_is_zero_aggregate() {
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        let m = DMatrix::from_fn(6, 1, |i, _| (i * i) as f64);
        let d = validate_dataset(x, m, DVector::from_fn(6, |i, _| i as f64)).unwrap();
        let w = AggregationWeights {
            a: DVector::from_vec(vec![1.0, -1.0]),
            b: DVector::from_vec(vec![1.0]),
            normalization: Normalization::AggregateUnit,
        };
        assert_eq!(compute_aggregates(&d, &w).unwrap_err(), Error::ZeroAggregate);
    }

    #[test]
    fn gram_breakdown_matches_direct() {
        let d = toy(40, 3, 4, 7);
        let mo = Moments::new(&d);
        let pen = PenaltyConfig { lambda_a: 0.2, lambda_b: 0.1, lambda_n: 0.3, ..Default::default() };
        let w = AggregationWeights {
            a: DVector::from_vec(vec![1.0, 0.4, -0.2]),
            b: DVector::from_vec(vec![1.0, 0.5, 0.1, 0.0]),
            normalization: Normalization::AggregateUnit,
        };
        let direct = objective_value(&d, &w, &pen).unwrap();
        let (a, b) = mo.normalize(&w.a, &w.b).unwrap();
        let gram = mo.breakdown(&a, &b, &pen);
        assert!((direct.total - gram.total).abs() < 1e-12 * direct.total.abs().max(1.0));
        assert!((direct.ssr_y_xm - gram.ssr_y_xm).abs() < 1e-9);
        assert!((gram.total - mo.phi(&a, &b, &pen)).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let d = toy(50, 3, 3, 11);
        let mo = Moments::new(&d);
        let pen = PenaltyConfig { lambda_n: 0.2, ..Default::default() };
        let (a, b) = mo.normalize(&DVector::from_vec(vec![1.0, 0.3, 0.2]), &DVector::from_vec(vec![0.8, 0.1, 0.5])).unwrap();
        let (ga, gb) = mo.grad(&a, &b, pen.lambda_n);
        let h = 1e-6;
        for i in 0..3 {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += h;
            am[i] -= h;
            let fd = (mo.phi_any(&ap, &b, &pen).unwrap() - mo.phi_any(&am, &b, &pen).unwrap()) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-6, "a {i}: {fd} vs {}", ga[i]);
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[i] += h;
            bm[i] -= h;
            let fd = (mo.phi_any(&a, &bp, &pen).unwrap() - mo.phi_any(&a, &bm, &pen).unwrap()) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-6, "b {i}: {fd} vs {}", gb[i]);
        }
    }
}
