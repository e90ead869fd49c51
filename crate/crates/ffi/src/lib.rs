//! C ABI over embseg: label-space loading and retrieval, checkpoint
//! inference, and mIoU.
//!
//! Every fallible call returns an [`EmbsegStatus`]; on failure the message
//! is available from [`embseg_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use embseg::eval::{infer, miou};
use embseg::label_space::LabelSpace;
use embseg::seg_head::SegModel;
use embseg::tensor::Tensor;
use embseg::Error;

/// Result codes shared by all fallible functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbsegStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    DimensionMismatch = 5,
    Domain = 6,
    UndefinedMetric = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A loaded label space.
pub struct EmbsegLabelSpace {
    inner: LabelSpace,
}

/// A loaded segmentation model checkpoint.
pub struct EmbsegModel {
    inner: SegModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> EmbsegStatus {
    match e {
        Error::Io { .. } => EmbsegStatus::Io,
        Error::Parse { .. } | Error::Format(_) => EmbsegStatus::Parse,
        Error::DimensionMismatch { .. } | Error::Shape { .. } => EmbsegStatus::DimensionMismatch,
        Error::Domain { .. } | Error::NonFinite { .. } => EmbsegStatus::Domain,
        Error::UndefinedMetric(_) => EmbsegStatus::UndefinedMetric,
        _ => EmbsegStatus::InvalidArgument,
    }
}

struct Fail(EmbsegStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(EmbsegStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EmbsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            EmbsegStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EmbsegStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(EmbsegStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, needed: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len < needed {
        return Err(Fail(EmbsegStatus::BufferTooSmall, format!("{what} holds {len} values, {needed} needed")));
    }
    if needed == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next embseg call on this thread.
#[no_mangle]
pub extern "C" fn embseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a JSONL label file (one `{name, description, embedding}` per line).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn embseg_label_space_load(path: *const c_char, out: *mut *mut EmbsegLabelSpace) -> EmbsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = LabelSpace::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(EmbsegLabelSpace { inner }));
        Ok(())
    })
}

/// # Safety
/// `space` must come from [`embseg_label_space_load`] and not be used
/// afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn embseg_label_space_free(space: *mut EmbsegLabelSpace) {
    if !space.is_null() {
        drop(Box::from_raw(space));
    }
}

/// Number of labels; 0 for null.
///
/// # Safety
/// `space` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn embseg_label_space_len(space: *const EmbsegLabelSpace) -> usize {
    space.as_ref().map_or(0, |s| s.inner.len())
}

/// Embedding dimension; 0 for null.
///
/// # Safety
/// `space` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn embseg_label_space_dim(space: *const EmbsegLabelSpace) -> usize {
    space.as_ref().map_or(0, |s| s.inner.dim())
}

/// Most cosine-similar label for `query`; ties go to the lowest id.
///
/// # Safety
/// `query` must point to `len` doubles; `out_id` and `out_score` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn embseg_label_space_retrieve(
    space: *const EmbsegLabelSpace,
    query: *const f64,
    len: usize,
    out_id: *mut usize,
    out_score: *mut f64,
) -> EmbsegStatus {
    guard(|| {
        let space = space.as_ref().ok_or_else(|| null("space"))?;
        if out_id.is_null() || out_score.is_null() {
            return Err(null("output pointer"));
        }
        let (id, score) = space.inner.retrieve(slice_arg(query, len, "query")?)?;
        *out_id = id;
        *out_score = score;
        Ok(())
    })
}

/// Row-major N×N cosine similarity matrix into `out` (capacity `out_len`).
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn embseg_label_space_similarity(space: *const EmbsegLabelSpace, out: *mut f64, out_len: usize) -> EmbsegStatus {
    guard(|| {
        let space = space.as_ref().ok_or_else(|| null("space"))?;
        let n = space.inner.len();
        let dst = out_slice(out, out_len, n * n, "out")?;
        for (i, row) in space.inner.similarity_matrix().into_iter().enumerate() {
            dst[i * n..(i + 1) * n].copy_from_slice(&row);
        }
        Ok(())
    })
}

/// Loads a checkpoint directory written by `embseg train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn embseg_model_load(dir: *const c_char, out: *mut *mut EmbsegModel) -> EmbsegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = SegModel::load(path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(EmbsegModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`embseg_model_load`] and not be used afterwards.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn embseg_model_free(model: *mut EmbsegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Labels an H×W×F row-major feature grid by nearest-label retrieval,
/// writing H·W label ids into `out_labels`.
///
/// # Safety
/// `features` must hold `height·width·feature_dim` doubles and
/// `out_labels` must have room for `out_len` ids.
#[no_mangle]
pub unsafe extern "C" fn embseg_model_infer(
    model: *const EmbsegModel,
    space: *const EmbsegLabelSpace,
    features: *const f64,
    height: usize,
    width: usize,
    feature_dim: usize,
    out_labels: *mut usize,
    out_len: usize,
) -> EmbsegStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let space = space.as_ref().ok_or_else(|| null("space"))?;
        let n = height * width * feature_dim;
        let data = slice_arg(features, n, "features")?.to_vec();
        let grid = Tensor::new(&[height, width, feature_dim], data)?;
        let labels = infer(&model.inner, &grid, &space.inner)?;
        out_slice(out_labels, out_len, labels.len(), "out_labels")?.copy_from_slice(&labels);
        Ok(())
    })
}

/// mIoU of `pred` against `truth` (−1 = ignore) over `classes` labels.
/// Per-class IoU goes to `out_per_class` when it is non-null (NaN for
/// classes absent from both maps).
///
/// # Safety
/// `pred` and `truth` must hold `len` values; `out_miou` must be writable;
/// `out_per_class`, if non-null, must hold `classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn embseg_miou(
    pred: *const usize,
    truth: *const i64,
    len: usize,
    classes: usize,
    out_miou: *mut f64,
    out_per_class: *mut f64,
) -> EmbsegStatus {
    guard(|| {
        if out_miou.is_null() {
            return Err(null("out_miou"));
        }
        let (m, per) = miou(slice_arg(pred, len, "pred")?, slice_arg(truth, len, "truth")?, classes)?;
        *out_miou = m;
        if !out_per_class.is_null() {
            let dst = std::slice::from_raw_parts_mut(out_per_class, classes);
            for (d, v) in dst.iter_mut().zip(per) {
                *d = v.unwrap_or(f64::NAN);
            }
        }
        Ok(())
    })
}
