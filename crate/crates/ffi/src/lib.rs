//! C ABI for the masked-reconstruction library: opaque model handles,
//! integer status codes, and a thread-local last-error message. Every
//! function catches panics at the boundary. Buffers are row-major f64 with
//! shape [num_windows][window_len][channels].

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use libc::c_char;
use ndarray::Array3;

use maskrecon::data::SensorWindow;
use maskrecon::error::Error;
use maskrecon::eval::macro_f1;
use maskrecon::masking::{apply_mask, MaskSpec};
use maskrecon::model::checkpoint::{load_checkpoint, save_checkpoint};
use maskrecon::model::{ForwardMode, ModelParams};

/// Success.
pub const MR_OK: i32 = 0;
/// Invalid argument or configuration.
pub const MR_ERR_ARGUMENT: i32 = 2;
/// Data, file format, or io failure.
pub const MR_ERR_DATA: i32 = 3;
/// Numeric failure (non-finite values, internal panic).
pub const MR_ERR_NUMERIC: i32 = 4;

/// Opaque handle to a trained or initialized model.
pub struct MrModel {
    inner: ModelParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> i32 {
    err.exit_code()
}

fn fail(err: Error) -> i32 {
    set_last_error(&err.to_string());
    status_of(&err)
}

fn fail_null(name: &str) -> i32 {
    set_last_error(&format!("null pointer: {name}"));
    MR_ERR_ARGUMENT
}

fn guard(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_last_error("internal panic");
            MR_ERR_NUMERIC
        }
    }
}

unsafe fn path_from(ptr: *const c_char) -> Result<PathBuf, i32> {
    if ptr.is_null() {
        return Err(fail_null("path"));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_last_error("path is not valid utf-8");
            Err(MR_ERR_ARGUMENT)
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Valid until the next
/// failing call on the same thread; empty string when nothing failed yet.
#[no_mangle]
pub extern "C" fn mr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint into a fresh handle. On success writes the handle to
/// `out` and returns MR_OK; the caller owns it and must free it with
/// `mr_model_free`.
#[no_mangle]
pub unsafe extern "C" fn mr_model_load(path: *const c_char, out: *mut *mut MrModel) -> i32 {
    guard(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match path_from(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match load_checkpoint(&path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(MrModel { inner }));
                MR_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes the model to a checkpoint file.
#[no_mangle]
pub unsafe extern "C" fn mr_model_save(model: *const MrModel, path: *const c_char) -> i32 {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        let path = match path_from(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match save_checkpoint(&model.inner, &path) {
            Ok(()) => MR_OK,
            Err(e) => fail(e),
        }
    })
}

/// Releases a handle returned by `mr_model_load`. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn mr_model_free(model: *mut MrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input channels the model expects, or -1 on null.
#[no_mangle]
pub unsafe extern "C" fn mr_model_input_channels(model: *const MrModel) -> i32 {
    model.as_ref().map_or(-1, |m| m.inner.input_channels as i32)
}

/// Number of classes the classifier head emits, or -1 on null.
#[no_mangle]
pub unsafe extern "C" fn mr_model_num_classes(model: *const MrModel) -> i32 {
    model.as_ref().map_or(-1, |m| m.inner.num_classes as i32)
}

/// Longest window the positional table covers, or -1 on null.
#[no_mangle]
pub unsafe extern "C" fn mr_model_max_len(model: *const MrModel) -> i32 {
    model.as_ref().map_or(-1, |m| m.inner.cfg.max_len as i32)
}

unsafe fn batch_from(
    data: *const f64,
    num_windows: usize,
    window_len: usize,
    channels: usize,
) -> Result<Array3<f64>, i32> {
    if data.is_null() {
        return Err(fail_null("data"));
    }
    let total = num_windows
        .checked_mul(window_len)
        .and_then(|v| v.checked_mul(channels))
        .filter(|&v| v > 0);
    let Some(total) = total else {
        set_last_error("batch dimensions are zero or overflow");
        return Err(MR_ERR_ARGUMENT);
    };
    let values = std::slice::from_raw_parts(data, total).to_vec();
    Array3::from_shape_vec((num_windows, window_len, channels), values)
        .map_err(|e| fail(Error::Argument(e.to_string())))
}

/// Classifies a batch in eval mode and writes one label per window to
/// `out_labels` (length `num_windows`).
#[no_mangle]
pub unsafe extern "C" fn mr_model_classify(
    model: *const MrModel,
    data: *const f64,
    num_windows: usize,
    window_len: usize,
    channels: usize,
    out_labels: *mut u32,
) -> i32 {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        if out_labels.is_null() {
            return fail_null("out_labels");
        }
        let batch = match batch_from(data, num_windows, window_len, channels) {
            Ok(b) => b,
            Err(code) => return code,
        };
        let logits = match model.inner.classify_input(batch.view(), ForwardMode::Eval, 0) {
            Ok(l) => l,
            Err(e) => return fail(e),
        };
        for (i, row) in logits.rows().into_iter().enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            *out_labels.add(i) = best as u32;
        }
        MR_OK
    })
}

/// Reconstructs a batch in eval mode, writing the same-shaped result to
/// `out` (length num_windows * window_len * channels).
#[no_mangle]
pub unsafe extern "C" fn mr_model_reconstruct(
    model: *const MrModel,
    data: *const f64,
    num_windows: usize,
    window_len: usize,
    channels: usize,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail_null("model");
        };
        if out.is_null() {
            return fail_null("out");
        }
        let batch = match batch_from(data, num_windows, window_len, channels) {
            Ok(b) => b,
            Err(code) => return code,
        };
        let rec = match model.inner.reconstruct_input(batch.view(), ForwardMode::Eval, 0) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        let rec = rec.as_standard_layout();
        let flat = rec.as_slice().expect("standard layout is contiguous");
        std::ptr::copy_nonoverlapping(flat.as_ptr(), out, flat.len());
        MR_OK
    })
}

/// Zeroes the listed time rows and channel columns of one row-major
/// `window_len` x `channels` window, in place. Out-of-range or duplicate
/// indices are rejected before anything is written.
#[no_mangle]
pub unsafe extern "C" fn mr_mask_apply(
    values: *mut f64,
    window_len: usize,
    channels: usize,
    time_indices: *const usize,
    time_len: usize,
    channel_indices: *const usize,
    channel_len: usize,
) -> i32 {
    guard(|| {
        if values.is_null() {
            return fail_null("values");
        }
        if time_len > 0 && time_indices.is_null() {
            return fail_null("time_indices");
        }
        if channel_len > 0 && channel_indices.is_null() {
            return fail_null("channel_indices");
        }
        let t: BTreeSet<usize> = if time_len == 0 {
            BTreeSet::new()
        } else {
            std::slice::from_raw_parts(time_indices, time_len)
                .iter()
                .copied()
                .collect()
        };
        let c: BTreeSet<usize> = if channel_len == 0 {
            BTreeSet::new()
        } else {
            std::slice::from_raw_parts(channel_indices, channel_len)
                .iter()
                .copied()
                .collect()
        };
        if t.len() != time_len || c.len() != channel_len {
            return fail(Error::Argument("duplicate mask indices".into()));
        }
        let spec = MaskSpec::new(t, c);
        let total = window_len.checked_mul(channels).filter(|&v| v > 0);
        let Some(total) = total else {
            set_last_error("window dimensions are zero or overflow");
            return MR_ERR_ARGUMENT;
        };
        let slice = std::slice::from_raw_parts_mut(values, total);
        let arr = ndarray::Array2::from_shape_vec((window_len, channels), slice.to_vec())
            .expect("length was checked");
        let window = match SensorWindow::new(arr, 0, "") {
            Ok(w) => w,
            Err(e) => return fail(e),
        };
        match apply_mask(&window, &spec) {
            Ok(masked) => {
                slice.copy_from_slice(masked.values.as_slice().expect("contiguous"));
                MR_OK
            }
            Err(e) => fail(e),
        }
    })
}

/// Macro-averaged F1 of `len` predictions against labels over
/// `num_classes` classes, written to `out_f1`.
#[no_mangle]
pub unsafe extern "C" fn mr_macro_f1(
    preds: *const u32,
    labels: *const u32,
    len: usize,
    num_classes: usize,
    out_f1: *mut f64,
) -> i32 {
    guard(|| {
        if preds.is_null() {
            return fail_null("preds");
        }
        if labels.is_null() {
            return fail_null("labels");
        }
        if out_f1.is_null() {
            return fail_null("out_f1");
        }
        let p: Vec<usize> = std::slice::from_raw_parts(preds, len)
            .iter()
            .map(|&v| v as usize)
            .collect();
        let l: Vec<usize> = std::slice::from_raw_parts(labels, len)
            .iter()
            .map(|&v| v as usize)
            .collect();
        match macro_f1(&p, &l, num_classes) {
            Ok((mean, _)) => {
                *out_f1 = mean;
                MR_OK
            }
            Err(e) => fail(e),
        }
    })
}
