//! C ABI over the `embfuse` core.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every function returns an
//! [`EmbfuseStatus`]; on failure a message for the calling thread is available
//! from [`embfuse_last_error`]. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use embfuse::evalkit;
use embfuse::lens;
use embfuse::prune::{self, PrunedSignature};
use embfuse::simgauge::{self, MetricConfig, PreparedSpace};
use embfuse::store::{load_embedding_file, EmbeddingMatrix};
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbfuseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericError = 4,
    Panic = 5,
}

/// Row-major embedding matrix with one encoder id.
pub struct EmbfuseMatrix {
    inner: EmbeddingMatrix,
}

/// Retained columns of a pruned feature matrix.
pub struct EmbfuseSignature {
    inner: PrunedSignature,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbfuseMetricConfig {
    pub knn_k: usize,
    pub ridge_lambda: f64,
    pub svcca_variance_fraction: f64,
    pub procrustes_dim_cap: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EmbfuseSimilarity {
    pub cka: f64,
    pub svcca: f64,
    pub procrustes: f64,
    pub knn_jaccard: f64,
    pub r2_ab: f64,
    pub r2_ba: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

struct Failure(EmbfuseStatus, String);

impl Failure {
    fn invalid(m: impl Into<String>) -> Self {
        Failure(EmbfuseStatus::InvalidArgument, m.into())
    }
    fn null(name: &str) -> Self {
        Failure(EmbfuseStatus::NullPointer, format!("`{name}` is null"))
    }
}

impl From<embfuse::store::StoreError> for Failure {
    fn from(e: embfuse::store::StoreError) -> Self {
        Failure(EmbfuseStatus::DataError, e.to_string())
    }
}

impl From<simgauge::SimilarityError> for Failure {
    fn from(e: simgauge::SimilarityError) -> Self {
        use simgauge::SimilarityError as E;
        let status = match e {
            E::DegenerateInput(_) | E::RankCollapse | E::SingularSystem => EmbfuseStatus::NumericError,
            E::InvalidConfig(_) | E::KTooLarge { .. } => EmbfuseStatus::InvalidArgument,
            _ => EmbfuseStatus::DataError,
        };
        Failure(status, e.to_string())
    }
}

impl From<prune::PruneError> for Failure {
    fn from(e: prune::PruneError) -> Self {
        let status = match e {
            prune::PruneError::BadTheta(_) => EmbfuseStatus::InvalidArgument,
            _ => EmbfuseStatus::DataError,
        };
        Failure(status, e.to_string())
    }
}

impl From<evalkit::EvalError> for Failure {
    fn from(e: evalkit::EvalError) -> Self {
        let status = match e {
            evalkit::EvalError::NonFinite(_) => EmbfuseStatus::NumericError,
            _ => EmbfuseStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<lens::LensError> for Failure {
    fn from(e: lens::LensError) -> Self {
        Failure(EmbfuseStatus::InvalidArgument, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EmbfuseStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(EmbfuseStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EmbfuseStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
            status
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, name: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::invalid(format!("`{name}` is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure::null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::null(name))
}

fn labels_from(raw: &[u8]) -> Result<Vec<u8>, Failure> {
    match raw.iter().find(|&&l| l > 1) {
        Some(l) => Err(Failure::invalid(format!("label {l} is not 0 or 1"))),
        None => Ok(raw.to_vec()),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn embfuse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into a new string, or
/// returns null if the last call succeeded. Free with [`embfuse_string_free`].
#[no_mangle]
pub extern "C" fn embfuse_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(m) => CString::new(m.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn embfuse_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a matrix from `rows × cols` row-major values.
///
/// # Safety
/// `data` must point to `rows * cols` doubles; `encoder_id` must be a
/// NUL-terminated string; `out_matrix` must be writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_matrix_new(
    encoder_id: *const c_char,
    data: *const f64,
    rows: usize,
    cols: usize,
    out_matrix: *mut *mut EmbfuseMatrix,
) -> EmbfuseStatus {
    guard(|| {
        let out_matrix = out(out_matrix, "out_matrix")?;
        let id = str_arg(encoder_id, "encoder_id")?;
        let len = rows.checked_mul(cols).ok_or_else(|| Failure::invalid("rows * cols overflows"))?;
        let values = slice(data, len, "data")?;
        let m = EmbeddingMatrix::from_values(id, DMatrix::from_row_slice(rows, cols, values))?;
        *out_matrix = Box::into_raw(Box::new(EmbfuseMatrix { inner: m }));
        Ok(())
    })
}

/// Loads a `.csv` or binary embedding file.
///
/// # Safety
/// `path` and `encoder_id` must be NUL-terminated strings; `out_matrix` writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_matrix_load(
    path: *const c_char,
    encoder_id: *const c_char,
    out_matrix: *mut *mut EmbfuseMatrix,
) -> EmbfuseStatus {
    guard(|| {
        let out_matrix = out(out_matrix, "out_matrix")?;
        let path = str_arg(path, "path")?;
        let id = str_arg(encoder_id, "encoder_id")?;
        let m = load_embedding_file(Path::new(path), id)?;
        *out_matrix = Box::into_raw(Box::new(EmbfuseMatrix { inner: m }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn embfuse_matrix_free(m: *mut EmbfuseMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_matrix_shape(m: *const EmbfuseMatrix, rows: *mut usize, cols: *mut usize) -> EmbfuseStatus {
    guard(|| {
        let m = handle(m, "m")?;
        *out(rows, "rows")? = m.inner.n_samples();
        *out(cols, "cols")? = m.inner.dim();
        Ok(())
    })
}

/// Fills `out_config` with the default metric parameters.
///
/// # Safety
/// `out_config` must be writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_metric_config_default(out_config: *mut EmbfuseMetricConfig) -> EmbfuseStatus {
    guard(|| {
        let d = MetricConfig::default();
        *out(out_config, "out_config")? = EmbfuseMetricConfig {
            knn_k: d.knn_k,
            ridge_lambda: d.ridge_lambda,
            svcca_variance_fraction: d.svcca_variance_fraction,
            procrustes_dim_cap: d.procrustes_dim_cap,
        };
        Ok(())
    })
}

/// All similarity scores between two matrices over the same samples.
/// A null `config` selects the defaults.
///
/// # Safety
/// `a`, `b` must be live handles; `config` null or readable; `out_scores` writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_similarity(
    a: *const EmbfuseMatrix,
    b: *const EmbfuseMatrix,
    config: *const EmbfuseMetricConfig,
    out_scores: *mut EmbfuseSimilarity,
) -> EmbfuseStatus {
    guard(|| {
        let a = handle(a, "a")?;
        let b = handle(b, "b")?;
        let out_scores = out(out_scores, "out_scores")?;
        let cfg = match config.as_ref() {
            None => MetricConfig::default(),
            Some(c) => MetricConfig {
                knn_k: c.knn_k,
                ridge_lambda: c.ridge_lambda,
                svcca_variance_fraction: c.svcca_variance_fraction,
                procrustes_dim_cap: c.procrustes_dim_cap,
            },
        };
        cfg.validate()?;
        let s = simgauge::score_pair(&PreparedSpace::new(&a.inner), &PreparedSpace::new(&b.inner), &cfg)?;
        *out_scores = EmbfuseSimilarity {
            cka: s.cka,
            svcca: s.svcca,
            procrustes: s.procrustes,
            knn_jaccard: s.knn_jaccard,
            r2_ab: s.r2_x_to_y,
            r2_ba: s.r2_y_to_x,
        };
        Ok(())
    })
}

/// Ranks the columns of `m` by class separation and prunes at `theta`.
///
/// # Safety
/// `m` must be a live handle; `labels` must hold one 0/1 byte per row;
/// `out_signature` writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_prune(
    m: *const EmbfuseMatrix,
    labels: *const u8,
    n_labels: usize,
    theta: f64,
    out_signature: *mut *mut EmbfuseSignature,
) -> EmbfuseStatus {
    guard(|| {
        let m = handle(m, "m")?;
        let out_signature = out(out_signature, "out_signature")?;
        let labels = labels_from(slice(labels, n_labels, "labels")?)?;
        let ranked = prune::rank_features(&m.inner, &labels)?;
        let sig = prune::correlation_prune(&m.inner, &ranked, theta)?;
        *out_signature = Box::into_raw(Box::new(EmbfuseSignature { inner: sig }));
        Ok(())
    })
}

/// # Safety
/// `s` must be a live handle; `len` writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_signature_len(s: *const EmbfuseSignature, len: *mut usize) -> EmbfuseStatus {
    guard(|| {
        *out(len, "len")? = handle(s, "s")?.inner.len();
        Ok(())
    })
}

/// Copies retained column indices (rank order) into `indices`, which must
/// have room for at least `capacity` entries.
///
/// # Safety
/// `s` must be a live handle; `indices` must be writable for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn embfuse_signature_indices(
    s: *const EmbfuseSignature,
    indices: *mut usize,
    capacity: usize,
) -> EmbfuseStatus {
    guard(|| {
        let s = handle(s, "s")?;
        let n = s.inner.len();
        if capacity < n {
            return Err(Failure::invalid(format!("capacity {capacity} < {n} retained columns")));
        }
        if n > 0 {
            if indices.is_null() {
                return Err(Failure::null("indices"));
            }
            std::slice::from_raw_parts_mut(indices, n).copy_from_slice(&s.inner.retained);
        }
        Ok(())
    })
}

/// Signature as JSON. Free the string with [`embfuse_string_free`].
///
/// # Safety
/// `s` must be a live handle; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_signature_to_json(s: *const EmbfuseSignature, out_json: *mut *mut c_char) -> EmbfuseStatus {
    guard(|| {
        let s = handle(s, "s")?;
        let out_json = out(out_json, "out_json")?;
        let text = serde_json::to_string(&s.inner).map_err(|e| Failure::invalid(e.to_string()))?;
        *out_json = CString::new(text).map_err(|e| Failure::invalid(e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn embfuse_signature_free(s: *mut EmbfuseSignature) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Rank-based AUC. `*defined` is false (and `*out_auc` NaN) when only one class is present.
///
/// # Safety
/// `probs` and `labels` must hold `n` values; `out_auc` and `defined` writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_auc(
    probs: *const f64,
    labels: *const u8,
    n: usize,
    out_auc: *mut f64,
    defined: *mut bool,
) -> EmbfuseStatus {
    guard(|| {
        let p = slice(probs, n, "probs")?;
        let l = labels_from(slice(labels, n, "labels")?)?;
        let out_auc = out(out_auc, "out_auc")?;
        let defined = out(defined, "defined")?;
        let a = evalkit::auc(p, &l)?;
        *defined = a.is_some();
        *out_auc = a.unwrap_or(f64::NAN);
        Ok(())
    })
}

/// Dice overlap of two 0/1 masks of length `n`; two empty masks give 1.
///
/// # Safety
/// `a` and `b` must hold `n` bytes; `out_dice` writable.
#[no_mangle]
pub unsafe extern "C" fn embfuse_dice(a: *const u8, b: *const u8, n: usize, out_dice: *mut f64) -> EmbfuseStatus {
    guard(|| {
        let a: Vec<bool> = labels_from(slice(a, n, "a")?)?.into_iter().map(|v| v == 1).collect();
        let b: Vec<bool> = labels_from(slice(b, n, "b")?)?.into_iter().map(|v| v == 1).collect();
        *out(out_dice, "out_dice")? = lens::dice(&a, &b)?.value;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_out_pointer_reports() {
        let st = unsafe { embfuse_dice(ptr::null(), ptr::null(), 0, ptr::null_mut()) };
        assert_eq!(st, EmbfuseStatus::NullPointer);
        let msg = embfuse_last_error();
        assert!(!msg.is_null());
        let text = unsafe { CStr::from_ptr(msg) }.to_str().unwrap().to_string();
        unsafe { embfuse_string_free(msg) };
        assert!(text.contains("out_dice"));
    }

    #[test]
    fn panic_is_contained() {
        assert_eq!(guard(|| panic!("boom")), EmbfuseStatus::Panic);
        let msg = embfuse_last_error();
        assert_eq!(unsafe { CStr::from_ptr(msg) }.to_str().unwrap(), "boom");
        unsafe { embfuse_string_free(msg) };
    }
}
