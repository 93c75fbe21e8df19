//! C interface over a trained recommendation model.
//!
//! Every function returns a [`StoprecStatus`]; on failure a human-readable
//! message is kept per thread and can be copied out with
//! [`stoprec_last_error`]. Models are opaque handles created by
//! [`stoprec_model_load`] and released with [`stoprec_model_free`]. A loaded
//! model is never mutated, so one handle may be shared across threads.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, UnwindSafe};
use std::path::Path;
use std::ptr;

use stoprec::bundle::load_model;
use stoprec::recommender::{top_k, Model};
use stoprec::Error;

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoprecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidModel = 4,
    UnknownPaper = 5,
    InvalidArgument = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Opaque handle to a loaded model.
pub struct StoprecModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn fail(status: StoprecStatus, msg: impl Into<String>) -> StoprecStatus {
    set_last_error(msg.into());
    status
}

fn status_of(err: &Error) -> StoprecStatus {
    match err {
        Error::Io(_) => StoprecStatus::Io,
        Error::UnknownPaper(_) => StoprecStatus::UnknownPaper,
        Error::Query(_) | Error::Config(_) => StoprecStatus::InvalidArgument,
        _ => StoprecStatus::InvalidModel,
    }
}

fn from_error(err: Error) -> StoprecStatus {
    fail(status_of(&err), err.to_string())
}

/// Runs `body`, turning panics into [`StoprecStatus::Panic`] so that no
/// unwinding crosses the C boundary.
fn guarded(body: impl FnOnce() -> StoprecStatus + UnwindSafe) -> StoprecStatus {
    set_last_error(String::new());
    catch_unwind(body).unwrap_or_else(|_| fail(StoprecStatus::Panic, "internal panic"))
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, StoprecStatus> {
    if ptr.is_null() {
        return Err(fail(StoprecStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(StoprecStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Copies `text` plus a terminating NUL into `buf`. `required`, when not
/// null, receives the buffer size needed including the NUL.
unsafe fn write_str(text: &str, buf: *mut c_char, len: usize, required: *mut usize) -> StoprecStatus {
    let needed = text.len() + 1;
    if !required.is_null() {
        *required = needed;
    }
    if buf.is_null() || len < needed {
        return fail(
            StoprecStatus::BufferTooSmall,
            format!("buffer of {len} bytes is smaller than the {needed} required"),
        );
    }
    ptr::copy_nonoverlapping(text.as_ptr(), buf.cast::<u8>(), text.len());
    *buf.add(text.len()) = 0;
    StoprecStatus::Ok
}

/// Loads the model bundle in directory `path` and stores a new handle in `out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stoprec_model_load(path: *const c_char, out: *mut *mut StoprecModel) -> StoprecStatus {
    guarded(|| {
        if out.is_null() {
            return fail(StoprecStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match read_str(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let path = Path::new(path);
        if !path.is_dir() {
            return fail(StoprecStatus::Io, format!("{} is not a directory", path.display()));
        }
        match load_model(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(StoprecModel { inner }));
                StoprecStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle returned by [`stoprec_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a live handle that is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stoprec_model_free(model: *mut StoprecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the number of datasets the model can recommend to `out`.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stoprec_model_num_datasets(model: *const StoprecModel, out: *mut usize) -> StoprecStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(StoprecStatus::NullPointer, "model or out is null");
        }
        *out = (*model).inner.num_datasets();
        StoprecStatus::Ok
    })
}

/// Copies the id of dataset `index` into `buf` as a NUL-terminated string.
/// `required`, when not null, receives the needed size, so a caller may pass
/// a null `buf` first to size the buffer.
///
/// # Safety
/// `model` must be a live handle; `buf` must be null or point to `len`
/// writable bytes; `required` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn stoprec_model_dataset_id(
    model: *const StoprecModel,
    index: usize,
    buf: *mut c_char,
    len: usize,
    required: *mut usize,
) -> StoprecStatus {
    guarded(|| {
        if model.is_null() {
            return fail(StoprecStatus::NullPointer, "model is null");
        }
        let ids = &(*model).inner.dataset_ids;
        match ids.get(index) {
            Some(id) => write_str(id, buf, len, required),
            None => fail(
                StoprecStatus::InvalidArgument,
                format!("dataset index {index} is outside 0..{}", ids.len()),
            ),
        }
    })
}

/// Ranks datasets for the `num_papers` paper ids in `papers` and writes the
/// `k` best dataset indices and scores, best first, to `out_indices` and
/// `out_scores`. `out_scores` may be null.
///
/// # Safety
/// `model` must be a live handle; `papers` must point to `num_papers`
/// NUL-terminated strings; `out_indices` must have room for `k` values and
/// `out_scores`, when not null, likewise.
#[no_mangle]
pub unsafe extern "C" fn stoprec_recommend(
    model: *const StoprecModel,
    papers: *const *const c_char,
    num_papers: usize,
    k: usize,
    out_indices: *mut usize,
    out_scores: *mut f64,
) -> StoprecStatus {
    guarded(|| {
        if model.is_null() || papers.is_null() || out_indices.is_null() {
            return fail(StoprecStatus::NullPointer, "model, papers or out_indices is null");
        }
        let model = &(*model).inner;
        if k == 0 || k > model.num_datasets() {
            return fail(
                StoprecStatus::InvalidArgument,
                format!("k = {k} is outside 1..={}", model.num_datasets()),
            );
        }
        let mut ids = Vec::with_capacity(num_papers);
        for i in 0..num_papers {
            match read_str(*papers.add(i), "paper id") {
                Ok(id) => ids.push(id),
                Err(status) => return status,
            }
        }
        let scores = match model.score_query(&ids) {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        let scores = scores.as_slice().expect("contiguous scores");
        for (slot, d) in top_k(scores, k).into_iter().enumerate() {
            *out_indices.add(slot) = d;
            if !out_scores.is_null() {
                *out_scores.add(slot) = scores[d];
            }
        }
        StoprecStatus::Ok
    })
}

/// Copies the calling thread's last error message into `buf`; an empty
/// string means the last call succeeded. Behaves like
/// [`stoprec_model_dataset_id`] with respect to `required`.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes; `required` must be
/// null or valid.
#[no_mangle]
pub unsafe extern "C" fn stoprec_last_error(buf: *mut c_char, len: usize, required: *mut usize) -> StoprecStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    let needed = msg.len() + 1;
    if !required.is_null() {
        *required = needed;
    }
    if buf.is_null() || len < needed {
        return StoprecStatus::BufferTooSmall;
    }
    ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), msg.len());
    *buf.add(msg.len()) = 0;
    StoprecStatus::Ok
}
