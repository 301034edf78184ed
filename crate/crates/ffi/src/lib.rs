//! C ABI over the `spatboost` core.
//!
//! Objects cross the boundary as opaque handles (`SbWeights`, `SbFit`) that
//! the caller releases with the matching `*_free` function. Every fallible
//! function returns an `SbStatus`; on failure `sb_last_error()` describes what
//! went wrong on the calling thread. Matrices are passed column-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use spatboost::boost::DesignBlock;
use spatboost::pipeline::{self, FitConfig, FitResult, Variant};
use spatboost::weights::{self, Coordinates, WeightMatrix};
use spatboost::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument, shape mismatch, unknown column or degenerate design.
    InvalidArgument = 2,
    /// Weight matrix is not a valid neighborhood structure.
    InvalidTopology = 3,
    NonFinite = 4,
    NonIdentified = 5,
    RankDeficient = 6,
    Singular = 7,
    Io = 8,
    /// A Rust panic was caught at the boundary.
    Internal = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbVariant {
    LsGb = 0,
    GbGb = 1,
    DsGb = 2,
    DsDs = 3,
    Fgls = 4,
}

impl From<SbVariant> for Variant {
    fn from(v: SbVariant) -> Self {
        match v {
            SbVariant::LsGb => Variant::LsGb,
            SbVariant::GbGb => Variant::GbGb,
            SbVariant::DsGb => Variant::DsGb,
            SbVariant::DsDs => Variant::DsDs,
            SbVariant::Fgls => Variant::Fgls,
        }
    }
}

/// Tuning options for `sb_fit`. Start from `sb_fit_options_default`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SbFitOptions {
    pub variant: SbVariant,
    pub learning_rate: f64,
    pub m_max: usize,
    pub folds: usize,
    pub subsample_fraction: f64,
    pub tau: f64,
    pub seed: u64,
    /// Non-zero skips tuning and stops every boosting step here.
    pub fixed_m_stop: usize,
}

impl SbFitOptions {
    fn to_config(self) -> FitConfig {
        let variant = Variant::from(self.variant);
        FitConfig {
            learning_rate: self.learning_rate,
            m_max: self.m_max,
            folds: self.folds,
            subsample_fraction: self.subsample_fraction,
            tau: self.tau,
            seed: self.seed,
            fixed_m_stop: (self.fixed_m_stop > 0).then_some(self.fixed_m_stop),
            ..FitConfig::for_variant(variant)
        }
    }
}

/// Sparse spatial weight matrix.
pub struct SbWeights(Arc<WeightMatrix>);

/// Result of one estimator variant.
pub struct SbFit(FitResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> SbStatus {
    match err {
        Error::InvalidTopology(_) | Error::IsolatedLocation { .. } => SbStatus::InvalidTopology,
        Error::NonFinite(_) => SbStatus::NonFinite,
        Error::NonIdentified(_) => SbStatus::NonIdentified,
        Error::RankDeficient(_) => SbStatus::RankDeficient,
        Error::Singular(_) => SbStatus::Singular,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => SbStatus::Io,
        Error::DimensionMismatch { .. }
        | Error::InvalidParameter(_)
        | Error::DegenerateColumn { .. }
        | Error::EmptyDesign
        | Error::OutOfRange { .. }
        | Error::Schema(_) => SbStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, converting errors and panics into a status and a message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SbStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            SbStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_last_error(msg);
            SbStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {msg}"));
            SbStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &'static str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or(Failure::Null(what))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn design(z: *const f64, n: usize, q: usize, names: &[String]) -> Result<DesignBlock, Failure> {
    let len = n.checked_mul(q).ok_or_else(|| Failure::Arg("n*q overflows".into()))?;
    let data = slice(z, len, "z")?;
    Ok(DesignBlock::new(nalgebra::DMatrix::from_column_slice(n, q, data), names.to_vec())?)
}

unsafe fn column_names(names: *const *const c_char, q: usize) -> Result<Vec<String>, Failure> {
    if names.is_null() {
        return Ok((1..=q).map(|j| format!("Z{j}")).collect());
    }
    let ptrs = slice(names, q, "names")?;
    ptrs.iter()
        .map(|&p| {
            if p.is_null() {
                return Err(Failure::Null("names[j]"));
            }
            CStr::from_ptr(p)
                .to_str()
                .map(str::to_string)
                .map_err(|_| Failure::Arg("column name is not valid UTF-8".into()))
        })
        .collect()
}

/// Message for the last failure on this thread, or NULL if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Circular-world weights: each of `n` locations linked to its `k`
/// predecessors and `k` successors. `normalize` row-normalizes.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sb_weights_circular(n: usize, k: usize, normalize: bool, out: *mut *mut SbWeights) -> SbStatus {
    guard(|| {
        let mut w = weights::build_circular(n, k)?;
        if normalize {
            w = weights::row_normalize(&w)?;
        }
        store(out, SbWeights(Arc::new(w)))
    })
}

/// k-nearest-neighbor weights from planar coordinates `xs`, `ys` of length `n`.
///
/// # Safety
/// `xs` and `ys` must point to `n` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn sb_weights_knn(
    xs: *const f64,
    ys: *const f64,
    n: usize,
    k: usize,
    normalize: bool,
    out: *mut *mut SbWeights,
) -> SbStatus {
    guard(|| {
        let xs = slice(xs, n, "xs")?;
        let ys = slice(ys, n, "ys")?;
        let coords = Coordinates::new(xs.iter().copied().zip(ys.iter().copied()).collect())?;
        let mut w = weights::build_knn(&coords, k)?;
        if normalize {
            w = weights::row_normalize(&w)?;
        }
        store(out, SbWeights(Arc::new(w)))
    })
}

/// Weights from `nnz` zero-based triplets `(rows[t], cols[t], vals[t])`.
///
/// # Safety
/// `rows`, `cols` and `vals` must each point to `nnz` readable elements.
#[no_mangle]
pub unsafe extern "C" fn sb_weights_from_triplets(
    n: usize,
    rows: *const usize,
    cols: *const usize,
    vals: *const f64,
    nnz: usize,
    out: *mut *mut SbWeights,
) -> SbStatus {
    guard(|| {
        let (r, c, v) = (slice(rows, nnz, "rows")?, slice(cols, nnz, "cols")?, slice(vals, nnz, "vals")?);
        let trip = (0..nnz).map(|t| (r[t], c[t], v[t]));
        store(out, SbWeights(Arc::new(WeightMatrix::from_triplets(n, trip, false)?)))
    })
}

/// Row-normalized copy of `w`.
///
/// # Safety
/// `w` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_weights_row_normalize(w: *const SbWeights, out: *mut *mut SbWeights) -> SbStatus {
    guard(|| {
        let w = handle(w, "w")?;
        store(out, SbWeights(Arc::new(weights::row_normalize(&w.0)?)))
    })
}

/// Number of locations, or 0 for NULL.
///
/// # Safety
/// `w` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_weights_n(w: *const SbWeights) -> usize {
    w.as_ref().map_or(0, |w| w.0.n())
}

/// Number of stored non-zeros, or 0 for NULL.
///
/// # Safety
/// `w` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_weights_nnz(w: *const SbWeights) -> usize {
    w.as_ref().map_or(0, |w| w.0.nnz())
}

/// # Safety
/// `w` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_weights_free(w: *mut SbWeights) {
    if !w.is_null() {
        drop(Box::from_raw(w));
    }
}

/// Default options for `variant`.
#[no_mangle]
pub extern "C" fn sb_fit_options_default(variant: SbVariant) -> SbFitOptions {
    let c = FitConfig::for_variant(variant.into());
    SbFitOptions {
        variant,
        learning_rate: c.learning_rate,
        m_max: c.m_max,
        folds: c.folds,
        subsample_fraction: c.subsample_fraction,
        tau: c.tau,
        seed: c.seed,
        fixed_m_stop: 0,
    }
}

/// Fits one estimator variant.
///
/// `z` is the `n × q` design in column-major order, `y` the response of
/// length `n`. `names` may be NULL, in which case columns are named
/// `Z1..Zq`. `opts` may be NULL for the DS-DS defaults.
///
/// # Safety
/// Pointers must reference arrays of the stated sizes; `w` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_fit(
    z: *const f64,
    n: usize,
    q: usize,
    names: *const *const c_char,
    y: *const f64,
    w: *const SbWeights,
    opts: *const SbFitOptions,
    out: *mut *mut SbFit,
) -> SbStatus {
    guard(|| {
        let names = column_names(names, q)?;
        let d = design(z, n, q, &names)?;
        let y = slice(y, n, "y")?;
        let w = handle(w, "w")?;
        let opts = opts.as_ref().copied().unwrap_or_else(|| sb_fit_options_default(SbVariant::DsDs));
        let cfg = opts.to_config();
        let fit = match opts.variant {
            SbVariant::Fgls => pipeline::fit_fgls_comparator(&d, y, &w.0, &cfg)?,
            _ => pipeline::fit_sdem(&d, y, &w.0, &cfg)?,
        };
        store(out, SbFit(fit))
    })
}

/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_lambda(fit: *const SbFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.lambda_hat)
}

/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_sigma2(fit: *const SbFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.sigma2_hat)
}

/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_intercept(fit: *const SbFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.0.intercept)
}

/// Final stopping iteration (0 for FGLS or NULL).
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_m_opt(fit: *const SbFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.m_opt)
}

/// Number of design columns, or 0 for NULL.
///
/// # Safety
/// `fit` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_q(fit: *const SbFit) -> usize {
    fit.as_ref().map_or(0, |f| f.0.names.len())
}

/// Copies the `q` coefficients into `out` (length `len`, must equal `q`).
///
/// # Safety
/// `out` must point to `len` writable doubles; `fit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_coefficients(fit: *const SbFit, out: *mut f64, len: usize) -> SbStatus {
    guard(|| {
        let f = &handle(fit, "fit")?.0;
        check_len(len, f.coefficients.len())?;
        slice_mut(out, len, "out")?.copy_from_slice(&f.coefficients);
        Ok(())
    })
}

/// Writes 1 for each selected column and 0 otherwise (length `len == q`).
///
/// # Safety
/// `out` must point to `len` writable bytes; `fit` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_selected(fit: *const SbFit, out: *mut u8, len: usize) -> SbStatus {
    guard(|| {
        let f = &handle(fit, "fit")?.0;
        check_len(len, f.names.len())?;
        for (o, name) in slice_mut(out, len, "out")?.iter_mut().zip(&f.names) {
            *o = u8::from(f.selected.contains(name));
        }
        Ok(())
    })
}

/// Trend prediction for a new `n_new × q` column-major design whose columns
/// are in the model's order.
///
/// # Safety
/// `z` must point to `n_new*q` doubles, `out` to `n_new` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_predict(
    fit: *const SbFit,
    z: *const f64,
    n_new: usize,
    q: usize,
    out: *mut f64,
) -> SbStatus {
    guard(|| {
        let f = &handle(fit, "fit")?.0;
        check_len(q, f.names.len())?;
        let d = design(z, n_new, q, &f.names)?;
        let eta = pipeline::predict(f, &d)?;
        slice_mut(out, n_new, "out")?.copy_from_slice(&eta);
        Ok(())
    })
}

/// Full result as a JSON string owned by the caller; release it with
/// `sb_string_free`.
///
/// # Safety
/// `fit` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_to_json(fit: *const SbFit, out: *mut *mut c_char) -> SbStatus {
    guard(|| {
        let f = &handle(fit, "fit")?.0;
        let s = serde_json::to_string(f).map_err(Error::from)?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = CString::new(s).map_err(|_| Failure::Arg("JSON contains NUL".into()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `fit` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_fit_free(fit: *mut SbFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

fn check_len(got: usize, want: usize) -> Result<(), Failure> {
    if got != want {
        return Err(Failure::Arg(format!("expected length {want}, got {got}")));
    }
    Ok(())
}
