//! C interface to a trained checkpoint: load it, run all-task prediction,
//! read the forward-pass counter.
//!
//! Every function returns an [`MtopStatus`]. On failure a message is kept
//! per thread and can be read with [`mtop_last_error`]. Panics are caught at
//! the boundary and reported as [`MtopStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mtop::model::MtopModel;
use mtop::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtopStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

/// Opaque model handle.
pub struct MtopHandle {
    model: MtopModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> MtopStatus {
    match err {
        Error::Io { .. } => MtopStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => MtopStatus::Checkpoint,
        _ => MtopStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MtopStatus, String)>) -> MtopStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtopStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside mtop");
            MtopStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (MtopStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MtopStatus, String) {
    (MtopStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mtop_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint written by `mtop train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mtop_model_load(
    path: *const c_char,
    out: *mut *mut MtopHandle,
) -> MtopStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (MtopStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let model = MtopModel::load(path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MtopHandle { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must come from [`mtop_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mtop_model_free(handle: *mut MtopHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// # Safety
/// `handle` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtop_model_num_tasks(
    handle: *const MtopHandle,
    out: *mut usize,
) -> MtopStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = h.model.num_tasks();
        Ok(())
    })
}

/// # Safety
/// `handle` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtop_model_num_classes(
    handle: *const MtopHandle,
    task: usize,
    out: *mut usize,
) -> MtopStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let spec = h.model.tasks().get(task).ok_or_else(|| {
            lib_err(Error::TaskOutOfRange {
                index: task,
                count: h.model.num_tasks(),
            })
        })?;
        *out = spec.num_classes;
        Ok(())
    })
}

/// Number of floats [`mtop_predict_all`] writes for `batch` examples.
///
/// # Safety
/// `handle` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtop_output_len(
    handle: *const MtopHandle,
    batch: usize,
    out: *mut usize,
) -> MtopStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = batch * h.model.tasks().iter().map(|t| t.num_classes).sum::<usize>();
        Ok(())
    })
}

/// Predicts every task for a batch.
///
/// `tokens` holds the examples' token ids back to back; `lengths[i]` is the
/// length of example `i`. Probabilities are written task by task, each task
/// a row-major `batch x classes` block.
///
/// # Safety
/// `tokens` must hold `sum(lengths)` ids, `lengths` `batch` entries and
/// `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mtop_predict_all(
    handle: *const MtopHandle,
    tokens: *const u32,
    lengths: *const usize,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> MtopStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if batch == 0 {
            return Err((MtopStatus::InvalidArgument, "batch is empty".into()));
        }
        if lengths.is_null() {
            return Err(null("lengths"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let lengths = std::slice::from_raw_parts(lengths, batch);
        let total: usize = lengths.iter().sum();
        if tokens.is_null() && total > 0 {
            return Err(null("tokens"));
        }
        let flat = if total == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(tokens, total)
        };
        let needed = batch * h.model.tasks().iter().map(|t| t.num_classes).sum::<usize>();
        if out_len < needed {
            return Err((
                MtopStatus::BufferTooSmall,
                format!("output needs {needed} floats, got {out_len}"),
            ));
        }
        let mut ids = Vec::with_capacity(batch);
        let mut at = 0;
        for &n in lengths {
            ids.push(
                flat[at..at + n]
                    .iter()
                    .map(|&t| t as usize)
                    .collect::<Vec<_>>(),
            );
            at += n;
        }
        let preds = h.model.predict_all_tasks(&ids).map_err(lib_err)?;
        let out = std::slice::from_raw_parts_mut(out, needed);
        let mut at = 0;
        for p in &preds.probs {
            out[at..at + p.len()].copy_from_slice(p.data());
            at += p.len();
        }
        Ok(())
    })
}

/// Encoder passes performed by this handle since load or the last reset.
///
/// # Safety
/// `handle` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtop_forward_passes(
    handle: *const MtopHandle,
    out: *mut u64,
) -> MtopStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = h.model.forward_passes();
        Ok(())
    })
}

/// # Safety
/// `handle` must be live.
#[no_mangle]
pub unsafe extern "C" fn mtop_reset_forward_passes(handle: *const MtopHandle) -> MtopStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        h.model.reset_forward_passes();
        Ok(())
    })
}
