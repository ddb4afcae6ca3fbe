//! C ABI over `non-core`: load a checkpoint, score encoded rows, compute AUC.
//!
//! Every fallible function returns a [`NonStatus`]. On failure a message is
//! kept per thread and can be read with [`non_last_error`]. Handles are
//! opaque and must be released with [`non_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use non_core::data::{Batch, EncodedTable, FieldKind};
use non_core::model::{Checkpoint, NonModel};
use non_core::NonError;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NonStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    SchemaMismatch = 5,
    UndefinedMetric = 6,
    Panic = 7,
    Internal = 8,
}

/// A loaded model.
pub struct NonModelHandle {
    model: NonModel,
    vocab_sizes: Vec<usize>,
    num_numerical: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("interior NULs removed"));
}

fn status_of(e: &NonError) -> NonStatus {
    match e {
        NonError::Io { .. } | NonError::MissingArtifact { .. } => NonStatus::Io,
        NonError::Parse { .. } | NonError::Row { .. } => NonStatus::Parse,
        NonError::SchemaMismatch { .. } => NonStatus::SchemaMismatch,
        NonError::UndefinedMetric(_) => NonStatus::UndefinedMetric,
        NonError::Shape { .. } | NonError::Contract(_) | NonError::Config(_) | NonError::Data(_) => {
            NonStatus::InvalidArgument
        }
        _ => NonStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (NonStatus, String)>) -> NonStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NonStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NonStatus::Panic
        }
    }
}

fn fail(e: NonError) -> (NonStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (NonStatus, String) {
    (NonStatus::NullPointer, format!("{what} is null"))
}

/// Message describing the last failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn non_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn non_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `non train` or `non search`. If
/// `schema_hash` is not null the checkpoint must have been built for it.
///
/// # Safety
/// `path` and a non-null `schema_hash` must be NUL-terminated strings;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn non_model_load(
    path: *const c_char,
    schema_hash: *const c_char,
    out: *mut *mut NonModelHandle,
) -> NonStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (NonStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let ckpt = Checkpoint::load(Path::new(path)).map_err(fail)?;
        if !schema_hash.is_null() {
            let expected = CStr::from_ptr(schema_hash)
                .to_str()
                .map_err(|_| (NonStatus::InvalidArgument, "schema hash is not UTF-8".to_string()))?;
            ckpt.check_schema(expected).map_err(fail)?;
        }
        let model = NonModel::from_checkpoint(&ckpt).map_err(fail)?;
        let vocab_sizes = model
            .fields()
            .iter()
            .filter(|f| f.kind == FieldKind::Categorical)
            .map(|f| f.vocab_size)
            .collect();
        let num_numerical = model.fields().iter().filter(|f| f.kind == FieldKind::Numerical).count();
        *out = Box::into_raw(Box::new(NonModelHandle {
            model,
            vocab_sizes,
            num_numerical,
        }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`non_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn non_model_free(handle: *mut NonModelHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of categorical fields; 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn non_model_num_categorical(handle: *const NonModelHandle) -> usize {
    handle.as_ref().map_or(0, |h| h.vocab_sizes.len())
}

/// Number of numerical fields; 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn non_model_num_numerical(handle: *const NonModelHandle) -> usize {
    handle.as_ref().map_or(0, |h| h.num_numerical)
}

/// Index range `[0, size)` of categorical field `field`, or 0 if out of
/// range. Index 0 is the unknown bucket.
///
/// # Safety
/// `handle` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn non_model_vocab_size(handle: *const NonModelHandle, field: usize) -> usize {
    handle
        .as_ref()
        .and_then(|h| h.vocab_sizes.get(field).copied())
        .unwrap_or(0)
}

/// Positive-class probabilities for `rows` encoded rows. `categorical` holds
/// `rows × num_categorical` indices and `numerical` holds
/// `rows × num_numerical` normalized values, both row-major; either may be
/// null when its count is zero. `out_probs` receives `rows` values.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn non_model_predict(
    handle: *const NonModelHandle,
    categorical: *const u32,
    numerical: *const f64,
    rows: usize,
    out_probs: *mut f64,
) -> NonStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if out_probs.is_null() {
            return Err(null("out_probs"));
        }
        let (c, u) = (h.vocab_sizes.len(), h.num_numerical);
        if rows == 0 {
            return Ok(());
        }
        if c > 0 && categorical.is_null() {
            return Err(null("categorical"));
        }
        if u > 0 && numerical.is_null() {
            return Err(null("numerical"));
        }
        let cats = if c > 0 { std::slice::from_raw_parts(categorical, rows * c) } else { &[] };
        let nums = if u > 0 { std::slice::from_raw_parts(numerical, rows * u) } else { &[] };
        let mut table = EncodedTable::empty(c, u);
        let mut idx = vec![0usize; c];
        for r in 0..rows {
            for (j, slot) in idx.iter_mut().enumerate() {
                let k = cats[r * c + j] as usize;
                if k >= h.vocab_sizes[j] {
                    return Err((
                        NonStatus::InvalidArgument,
                        format!("row {r}: index {k} out of range for categorical field {j}"),
                    ));
                }
                *slot = k;
            }
            table.push_row(&idx, &nums[r * u..(r + 1) * u], 0.0);
        }
        let probs = h.model.predict_proba(&Batch(table)).map_err(fail)?;
        std::slice::from_raw_parts_mut(out_probs, rows).copy_from_slice(&probs);
        Ok(())
    })
}

/// Rank-based AUC with ties counted one half. Fails with
/// [`NonStatus::UndefinedMetric`] unless both classes occur.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn non_auc(scores: *const f64, labels: *const f64, n: usize, out: *mut f64) -> NonStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let y = std::slice::from_raw_parts(labels, n);
        *out = non_core::eval::auc(s, y).map_err(fail)?;
        Ok(())
    })
}
