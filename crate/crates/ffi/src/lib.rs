//! C interface to the aggmed solver.
//!
//! Every function returns an [`AggmedStatus`]; results come back through out
//! pointers. Handles are opaque and must be released with the matching
//! `*_free` function. The message of the most recent failure on the calling
//! thread is available from [`aggmed_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use aggmed::model::{standardize_columns, validate_dataset, Dataset, FitResult, PenaltyConfig};
use aggmed::simulation::{generate_dataset, Regime, SimConfig};
use aggmed::{Error, SolverOptions};
use nalgebra::{DMatrix, DVector};

/// Status codes. Values 2 to 12 equal the CLI exit codes of the same class.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggmedStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Io = 3,
    Parse = 4,
    Data = 5,
    Params = 6,
    Profiling = 7,
    NoSolution = 8,
    NonDescent = 9,
    Simulation = 10,
    Oracle = 11,
    SelfCheck = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

impl From<&Error> for AggmedStatus {
    fn from(e: &Error) -> Self {
        match e.exit_code() {
            2 => AggmedStatus::Config,
            3 => AggmedStatus::Io,
            4 => AggmedStatus::Parse,
            5 => AggmedStatus::Data,
            6 => AggmedStatus::Params,
            7 => AggmedStatus::Profiling,
            8 => AggmedStatus::NoSolution,
            9 => AggmedStatus::NonDescent,
            10 => AggmedStatus::Simulation,
            11 => AggmedStatus::Oracle,
            _ => AggmedStatus::SelfCheck,
        }
    }
}

/// Opaque dataset handle (standardized columns, centered outcome).
pub struct AggmedDataset(Dataset);

/// Opaque fit handle.
pub struct AggmedFit(FitResult);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AggmedCoefficients {
    pub tau: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub eta: f64,
    pub mp: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AggmedFitOptions {
    pub lambda_a: f64,
    pub lambda_b: f64,
    pub lambda_n: f64,
    /// Multiplier applied to both sparsity penalties.
    pub c_lambda: f64,
    pub rho: f64,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), AggmedStatus>) -> AggmedStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AggmedStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside aggmed".into());
            AggmedStatus::Panic
        }
    }
}

fn lift(e: Error) -> AggmedStatus {
    let s = AggmedStatus::from(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> AggmedStatus {
    set_error(format!("null pointer: {what}"));
    AggmedStatus::NullPointer
}

/// Copies the last error message of this thread into `buf` (NUL terminated,
/// truncated to `len`). Returns the full message length excluding the NUL,
/// or 0 when there is none.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn aggmed_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let k = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, k);
            *buf.add(k) = 0;
        }
        bytes.len()
    })
}

/// Static description of a status code.
#[no_mangle]
pub extern "C" fn aggmed_status_str(status: AggmedStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        AggmedStatus::Ok => b"ok\0",
        AggmedStatus::NullPointer => b"null pointer\0",
        AggmedStatus::Config => b"configuration error\0",
        AggmedStatus::Io => b"io error\0",
        AggmedStatus::Parse => b"parse error\0",
        AggmedStatus::Data => b"invalid data\0",
        AggmedStatus::Params => b"invalid parameters\0",
        AggmedStatus::Profiling => b"profiling failed\0",
        AggmedStatus::NoSolution => b"no admissible solution\0",
        AggmedStatus::NonDescent => b"descent invariant violated\0",
        AggmedStatus::Simulation => b"simulation error\0",
        AggmedStatus::Oracle => b"oracle error\0",
        AggmedStatus::SelfCheck => b"self-check failed\0",
        AggmedStatus::BufferTooSmall => b"buffer too small\0",
        AggmedStatus::Panic => b"internal panic\0",
    };
    s.as_ptr() as *const c_char
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn aggmed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Default fit options (no penalties, 10 restarts, seed 0).
#[no_mangle]
pub extern "C" fn aggmed_fit_options_default() -> AggmedFitOptions {
    let s = SolverOptions::default();
    let p = PenaltyConfig::default();
    AggmedFitOptions {
        lambda_a: p.lambda_a,
        lambda_b: p.lambda_b,
        lambda_n: p.lambda_n,
        c_lambda: p.c_lambda,
        rho: p.rho,
        restarts: s.restarts,
        max_iter: s.max_iter,
        seed: s.seed,
    }
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize) -> DMatrix<f64> {
    // row-major input
    DMatrix::from_row_slice(rows, cols, std::slice::from_raw_parts(p, rows * cols))
}

/// Builds a dataset from row-major `x` (n×m), `m` (n×q) and `y` (n). Columns
/// are standardized and `y` centered.
///
/// # Safety
/// Array pointers must be valid for the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aggmed_dataset_new(
    x: *const f64,
    mediators: *const f64,
    y: *const f64,
    n: usize,
    m: usize,
    q: usize,
    out: *mut *mut AggmedDataset,
) -> AggmedStatus {
    guard(|| {
        if x.is_null() || mediators.is_null() || y.is_null() || out.is_null() {
            return Err(null("dataset arrays"));
        }
        if n == 0 || m == 0 || q == 0 {
            return Err(lift(Error::EmptyInput));
        }
        let d = validate_dataset(matrix(x, n, m), matrix(mediators, n, q), DVector::from_column_slice(std::slice::from_raw_parts(y, n)))
            .and_then(|d| standardize_columns(&d))
            .map_err(lift)?;
        *out = Box::into_raw(Box::new(AggmedDataset(d)));
        Ok(())
    })
}

/// Simulates a dataset from the compound-symmetry generator and returns it
/// standardized. `target_mp` in (0, 1) selects partial mediation; any other
/// value gives complete mediation. Other generator settings take defaults.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aggmed_dataset_simulate(
    n: usize,
    m: usize,
    q: usize,
    rho_x: f64,
    rho_m: f64,
    target_mp: f64,
    seed: u64,
    out: *mut *mut AggmedDataset,
) -> AggmedStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let regime = if target_mp > 0.0 && target_mp < 1.0 { Regime::Partial { target_mp } } else { Regime::Complete };
        let s = SimConfig::default().s.min(m).min(q);
        let cfg = SimConfig { n, m, q, rho_x, rho_m, s, regime, seed, ..Default::default() };
        let (raw, _) = generate_dataset(&cfg).map_err(lift)?;
        let d = standardize_columns(&raw).map_err(lift)?;
        *out = Box::into_raw(Box::new(AggmedDataset(d)));
        Ok(())
    })
}

/// Writes n, m, q of a dataset. Any out pointer may be null.
///
/// # Safety
/// `ds` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aggmed_dataset_shape(ds: *const AggmedDataset, n: *mut usize, m: *mut usize, q: *mut usize) -> AggmedStatus {
    guard(|| {
        let d = &ds.as_ref().ok_or_else(|| null("dataset"))?.0;
        for (p, v) in [(n, d.n()), (m, d.n_exposures()), (q, d.n_mediators())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aggmed_dataset_free(ds: *mut AggmedDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fits the penalized model. A null `opts` uses the defaults.
///
/// # Safety
/// `ds` must be a live handle, `opts` null or valid, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aggmed_fit(ds: *const AggmedDataset, opts: *const AggmedFitOptions, out: *mut *mut AggmedFit) -> AggmedStatus {
    guard(|| {
        let d = &ds.as_ref().ok_or_else(|| null("dataset"))?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let o = opts.as_ref().copied().unwrap_or_else(|| aggmed_fit_options_default());
        let pen = PenaltyConfig { c_lambda: o.c_lambda, rho: o.rho, ..PenaltyConfig::new(o.lambda_a, o.lambda_b, o.lambda_n) };
        let solver = SolverOptions { restarts: o.restarts, max_iter: o.max_iter, seed: o.seed, ..Default::default() };
        solver.validate().map_err(lift)?;
        let r = aggmed::fit(d, &pen, &solver).map_err(lift)?;
        *out = Box::into_raw(Box::new(AggmedFit(r)));
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aggmed_fit_free(fit: *mut AggmedFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn aggmed_fit_coefficients(fit: *const AggmedFit, out: *mut AggmedCoefficients) -> AggmedStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = f.coefficients;
        *out = AggmedCoefficients { tau: c.tau_hat, alpha: c.alpha_hat, gamma: c.gamma_hat, eta: c.eta_hat, mp: c.mp_hat };
        Ok(())
    })
}

/// Objective value, iteration count and convergence flag. Any out pointer may
/// be null.
///
/// # Safety
/// `fit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn aggmed_fit_summary(
    fit: *const AggmedFit,
    objective: *mut f64,
    iterations: *mut usize,
    converged: *mut bool,
) -> AggmedStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        if let Some(p) = objective.as_mut() {
            *p = f.objective;
        }
        if let Some(p) = iterations.as_mut() {
            *p = f.iterations;
        }
        if let Some(p) = converged.as_mut() {
            *p = f.converged;
        }
        Ok(())
    })
}

unsafe fn copy_out(v: &[f64], buf: *mut f64, len: usize, written: *mut usize) -> Result<(), AggmedStatus> {
    if let Some(w) = written.as_mut() {
        *w = v.len();
    }
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if len < v.len() {
        set_error(format!("buffer holds {len} values, {} needed", v.len()));
        return Err(AggmedStatus::BufferTooSmall);
    }
    ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
    Ok(())
}

/// Copies the exposure weights into `buf`. `written` receives the vector
/// length even when the buffer is too small.
///
/// # Safety
/// `fit` must be a live handle, `buf` valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn aggmed_fit_weights_a(fit: *const AggmedFit, buf: *mut f64, len: usize, written: *mut usize) -> AggmedStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        copy_out(f.weights.a.as_slice(), buf, len, written)
    })
}

/// Mediator counterpart of [`aggmed_fit_weights_a`].
///
/// # Safety
/// `fit` must be a live handle, `buf` valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn aggmed_fit_weights_b(fit: *const AggmedFit, buf: *mut f64, len: usize, written: *mut usize) -> AggmedStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.0;
        copy_out(f.weights.b.as_slice(), buf, len, written)
    })
}
