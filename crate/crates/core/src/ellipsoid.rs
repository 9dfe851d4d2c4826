//! Exact minimization of (ρ/2)‖v‖² − βᵀv over the ellipsoid surface vᵀGv = 1,
//! optionally intersected with a hyperplane hᵀv = c.
//!
//! G may be singular (more columns than rows). Off its range the constraint
//! is silent and the minimizer is simply β/ρ there.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Ellipsoid {
    vals: DVector<f64>,
    vecs: DMatrix<f64>,
    null: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(g: &DMatrix<f64>) -> Result<Self> {
        let eig = SymmetricEigen::new(g.clone());
        let max = eig.eigenvalues.max();
        if !(max > 0.0) {
            return Err(Error::SingularBlockSystem);
        }
        let (pos, zero): (Vec<usize>, Vec<usize>) = (0..g.nrows()).partition(|&i| eig.eigenvalues[i] > 1e-12 * max);
        Ok(Ellipsoid {
            vals: DVector::from_iterator(pos.len(), pos.iter().map(|&i| eig.eigenvalues[i])),
            vecs: eig.eigenvectors.select_columns(&pos),
            null: eig.eigenvectors.select_columns(&zero),
        })
    }

    /// Rank of G.
    pub fn dim(&self) -> usize {
        self.vals.len()
    }

    /// Global minimizer of (ρ/2)‖v‖² − βᵀv subject to vᵀGv = 1, ρ ≥ 0.
    /// With singular G and ρ = 0 the problem is unbounded; the null-space
    /// part is then left at zero.
    pub fn minimize(&self, rho: f64, beta: &DVector<f64>) -> DVector<f64> {
        self.unrotate(&self.minimize_rotated(rho, &self.rotate(beta)))
    }

    /// Coordinates in the orthonormal eigenbasis of G, range first, then null space.
    pub fn rotate(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(v.len());
        y.rows_mut(0, self.dim()).copy_from(&self.vecs.tr_mul(v));
        if self.null.ncols() > 0 {
            y.rows_mut(self.dim(), self.null.ncols()).copy_from(&self.null.tr_mul(v));
        }
        y
    }

    pub fn unrotate(&self, y: &DVector<f64>) -> DVector<f64> {
        let k = self.dim();
        let mut v = &self.vecs * y.rows(0, k);
        if self.null.ncols() > 0 {
            v += &self.null * y.rows(k, self.null.ncols());
        }
        v
    }

    /// Gv in rotated coordinates, from rotated v.
    pub fn gram_rotated(&self, y: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(y.len(), |i, _| if i < self.dim() { self.vals[i] * y[i] } else { 0.0 })
    }

    /// `minimize` with β and the result both in rotated coordinates.
    pub fn minimize_rotated(&self, rho: f64, beta: &DVector<f64>) -> DVector<f64> {
        let k = self.dim();
        let mut y = DVector::zeros(beta.len());
        y.rows_mut(0, k).copy_from(&self.minimize_range(rho, beta.rows(0, k).as_slice()));
        if rho > 0.0 {
            for i in k..beta.len() {
                y[i] = beta[i] / rho;
            }
        }
        y
    }

    fn minimize_range(&self, rho: f64, bt: &[f64]) -> DVector<f64> {
        let k = self.dim();
        // secular form ‖(D + t)⁻¹ g‖ = 1 with D = ρ/λ
        let g: Vec<f64> = (0..k).map(|i| bt[i] / self.vals[i].sqrt()).collect();
        let d: Vec<f64> = (0..k).map(|i| rho / self.vals[i]).collect();
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tie = 1e-12 * dmin.abs().max(1e-300);
        let lead: Vec<usize> = (0..k).filter(|&i| d[i] - dmin <= tie).collect();
        let lead_mass: f64 = lead.iter().map(|&i| g[i] * g[i]).sum::<f64>().sqrt();

        let mut c = vec![0.0; k];
        if lead_mass <= 1e-14 * gnorm.max(1e-300) {
            // possible hard case: evaluate the norm at the pole with leading terms dropped
            let mut s = 0.0;
            for i in 0..k {
                if !lead.contains(&i) {
                    s += (g[i] / (d[i] - dmin)).powi(2);
                }
            }
            if s <= 1.0 {
                for i in 0..k {
                    if !lead.contains(&i) {
                        c[i] = g[i] / (d[i] - dmin);
                    }
                }
                c[lead[0]] = (1.0 - s).max(0.0).sqrt();
                return self.back(&c);
            }
        }

        let norm_at = |t: f64| -> (f64, f64) {
            let mut s2 = 0.0;
            let mut s3 = 0.0;
            for i in 0..k {
                let den = d[i] + t;
                s2 += g[i] * g[i] / (den * den);
                s3 += g[i] * g[i] / (den * den * den);
            }
            (s2.sqrt(), s3)
        };
        let mut lo = -dmin;
        let mut hi = gnorm - dmin;
        let mut t = hi;
        for _ in 0..200 {
            let (nq, s3) = norm_at(t);
            let psi = 1.0 / nq - 1.0;
            if psi.abs() <= 1e-15 {
                break;
            }
            if psi > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let dpsi = s3 / (nq * nq * nq);
            let mut next = t - psi / dpsi;
            if !(next > lo && next < hi) || !next.is_finite() {
                next = 0.5 * (lo + hi);
            }
            if (hi - lo) <= 1e-16 * (hi.abs() + lo.abs()).max(1e-300) {
                break;
            }
            t = next;
        }
        for i in 0..k {
            c[i] = g[i] / (d[i] + t);
        }
        // remove the residual scale error of the root
        let nq = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in c.iter_mut() {
            *v /= nq;
        }
        self.back(&c)
    }

    fn back(&self, c: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| c[i] / self.vals[i].sqrt())
    }
}

/// Orthonormal basis of the complement of `h` (columns).
pub fn complement_basis(h: &DVector<f64>) -> DMatrix<f64> {
    let k = h.len();
    let hn = h / h.norm();
    let sign = if hn[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut v = hn.clone();
    v[0] += sign;
    let vv = v.norm_squared();
    let house = DMatrix::identity(k, k) - (&v * v.transpose()) * (2.0 / vv);
    house.columns(1, k - 1).into_owned()
}

/// The set {vᵀGv = 1, hᵀv = c} written as a centred ellipsoid in the
/// complement of h, so repeated solves only cost a projection.
#[derive(Debug, Clone)]
pub struct Slice {
    ap: DVector<f64>,
    n: DMatrix<f64>,
    tc: DVector<f64>,
    ell: Ellipsoid,
}

impl Slice {
    /// `None` when the slice is empty.
    pub fn new(g: &DMatrix<f64>, h: &DVector<f64>, c: f64) -> Option<Self> {
        let k = h.len();
        if k < 2 || h.norm() == 0.0 {
            return None;
        }
        let n = complement_basis(h);
        let ap = h * (c / h.norm_squared());
        let gn = g * &n;
        let gh = n.tr_mul(&gn);
        let gp = gn.tr_mul(&ap);
        let c0 = ap.dot(&(g * &ap));
        // centre of the slice's quadric; gh may be singular, gp must lie in its range
        let eig = SymmetricEigen::new(gh.clone());
        let max = eig.eigenvalues.max();
        if !(max > 0.0) {
            return None;
        }
        let inv = eig.eigenvalues.map(|l| if l > 1e-12 * max { 1.0 / l } else { 0.0 });
        let tc = -(&eig.eigenvectors * inv.component_mul(&eig.eigenvectors.tr_mul(&gp)));
        if (&gh * &tc + &gp).norm() > 1e-9 * (1.0 + gp.norm()) {
            return None;
        }
        let radius = 1.0 - c0 + tc.dot(&(&gh * &tc));
        if !(radius > 0.0) {
            return None;
        }
        let ell = Ellipsoid::new(&(gh / radius)).ok()?;
        Some(Slice { ap, n, tc, ell })
    }

    /// Minimizer of (ρ/2)‖v‖² − βᵀv over the slice.
    pub fn minimize(&self, rho: f64, beta: &DVector<f64>) -> DVector<f64> {
        let bh = self.n.tr_mul(beta) - &self.tc * rho;
        let s = self.ell.minimize(rho, &bh);
        &self.ap + &self.n * (&self.tc + s)
    }
}

/// Minimizer of (ρ/2)‖v‖² − βᵀv over {vᵀGv = 1, hᵀv = c}; `None` when the slice is empty.
pub fn minimize_on_slice(g: &DMatrix<f64>, rho: f64, beta: &DVector<f64>, h: &DVector<f64>, c: f64) -> Option<DVector<f64>> {
    Some(Slice::new(g, h, c)?.minimize(rho, beta))
}
