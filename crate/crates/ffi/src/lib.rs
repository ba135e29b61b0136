//! C ABI for the nriqa image quality model.
//!
//! Every function returns an [`nriqa_status`] code; 0 means success. On any
//! failure the thread-local error message is updated and can be copied out
//! with [`nriqa_last_error`]. Handles are opaque and must be released with
//! their matching `_free` function exactly once. Passing a handle after
//! freeing it, or sharing one handle across threads without external
//! synchronization, is undefined behavior, as usual for C APIs.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use nriqa::checkpoint::{load_model, save_checkpoint, TrainCounters};
use nriqa::config::ModelConfig;
use nriqa::data::{load_manifest, synthesize_dataset, Dataset, ImageBuf};
use nriqa::error::Error;
use nriqa::model::Model;
use nriqa::protocol::evaluate;
use nriqa::train::{train, LabelPolicy, TrainOptions};

/// Status codes returned by every `nriqa_*` function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum nriqa_status {
    NRIQA_OK = 0,
    /// A required pointer argument was NULL.
    NRIQA_NULL_ARGUMENT = 1,
    /// A string argument was not valid UTF-8.
    NRIQA_INVALID_UTF8 = 2,
    /// Invalid configuration or configuration/shape mismatch.
    NRIQA_CONFIG_ERROR = 3,
    /// Malformed manifest, label, image or other data problem.
    NRIQA_DATA_ERROR = 4,
    /// Non-finite values or degenerate numeric inputs.
    NRIQA_NUMERIC_ERROR = 5,
    /// Filesystem failure or malformed checkpoint.
    NRIQA_IO_ERROR = 6,
}

use nriqa_status::*;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_of(err: &Error) -> nriqa_status {
    match err {
        Error::Config(_) | Error::Shape(_) => NRIQA_CONFIG_ERROR,
        Error::Data(_) => NRIQA_DATA_ERROR,
        Error::Numeric(_) => NRIQA_NUMERIC_ERROR,
        Error::Io { .. } | Error::Checkpoint(_) => NRIQA_IO_ERROR,
    }
}

fn fail(err: Error) -> nriqa_status {
    set_error(&err.to_string());
    status_of(&err)
}

/// Copies the message of the most recent failure on this thread into `buf`
/// (NUL-terminated, truncated to `cap`). Returns the full message length in
/// bytes, excluding the terminator; 0 means no error has occurred yet.
/// Passing `buf = NULL` or `cap = 0` only queries the length.
#[no_mangle]
pub extern "C" fn nriqa_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nriqa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// An opaque trained or initialized model handle.
pub struct nriqa_model {
    inner: Model<f32>,
    counters: TrainCounters,
}

/// An opaque dataset handle.
pub struct nriqa_dataset {
    inner: Dataset,
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, nriqa_status> {
    if p.is_null() {
        set_error("required string argument is NULL");
        return Err(NRIQA_NULL_ARGUMENT);
    }
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        NRIQA_INVALID_UTF8
    })
}

fn require<'a, T>(p: *const T) -> Result<&'a T, nriqa_status> {
    if p.is_null() {
        set_error("required handle argument is NULL");
        return Err(NRIQA_NULL_ARGUMENT);
    }
    Ok(unsafe { &*p })
}

fn require_mut<'a, T>(p: *mut T) -> Result<&'a mut T, nriqa_status> {
    if p.is_null() {
        set_error("required handle argument is NULL");
        return Err(NRIQA_NULL_ARGUMENT);
    }
    Ok(unsafe { &mut *p })
}

macro_rules! ffi_try {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

macro_rules! core_try {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(err) => return fail(err),
        }
    };
}

/// Creates a model from a config JSON string (`config_json = NULL` selects
/// the built-in desk-scale defaults). `seed` overrides the config seed.
/// On success `*out` owns the new handle.
#[no_mangle]
pub extern "C" fn nriqa_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut nriqa_model,
) -> nriqa_status {
    let out = ffi_try!(require_mut(out));
    let mut cfg = if config_json.is_null() {
        ModelConfig::desk()
    } else {
        let text = ffi_try!(unsafe { cstr(config_json) });
        match serde_json::from_str::<ModelConfig>(text) {
            Ok(cfg) => cfg,
            Err(e) => return fail(Error::Config(format!("config JSON: {e}"))),
        }
    };
    cfg.seed = seed;
    core_try!(cfg.validate());
    let model = core_try!(Model::new(cfg));
    *out = Box::into_raw(Box::new(nriqa_model {
        inner: model,
        counters: TrainCounters::default(),
    }));
    NRIQA_OK
}

/// Loads a model from a checkpoint directory written by `nriqa_model_save`
/// or by the CLI trainer.
#[no_mangle]
pub extern "C" fn nriqa_model_load(
    dir: *const c_char,
    out: *mut *mut nriqa_model,
) -> nriqa_status {
    let out = ffi_try!(require_mut(out));
    let dir = ffi_try!(unsafe { cstr(dir) });
    let (model, counters, _extra) = core_try!(load_model::<f32>(Path::new(dir)));
    *out = Box::into_raw(Box::new(nriqa_model {
        inner: model,
        counters,
    }));
    NRIQA_OK
}

/// Writes the model (tensors, config fingerprint, training counters) to a
/// checkpoint directory, creating it if needed.
#[no_mangle]
pub extern "C" fn nriqa_model_save(
    model: *const nriqa_model,
    dir: *const c_char,
) -> nriqa_status {
    let model = ffi_try!(require(model));
    let dir = ffi_try!(unsafe { cstr(dir) });
    core_try!(save_checkpoint(
        Path::new(dir),
        &model.inner,
        &[],
        &model.counters
    ));
    NRIQA_OK
}

/// Releases a model handle. NULL is ignored.
#[no_mangle]
pub extern "C" fn nriqa_model_free(model: *mut nriqa_model) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Loads a dataset from a manifest CSV (columns `path,mos[,scene,distortion]`,
/// image paths relative to the manifest).
#[no_mangle]
pub extern "C" fn nriqa_dataset_load(
    manifest: *const c_char,
    out: *mut *mut nriqa_dataset,
) -> nriqa_status {
    let out = ffi_try!(require_mut(out));
    let manifest = ffi_try!(unsafe { cstr(manifest) });
    let ds = core_try!(load_manifest(PathBuf::from(manifest)));
    *out = Box::into_raw(Box::new(nriqa_dataset { inner: ds }));
    NRIQA_OK
}

/// Generates the synthetic labeled dataset (`n` images of side `image_size`)
/// entirely in memory.
#[no_mangle]
pub extern "C" fn nriqa_dataset_synthesize(
    n: usize,
    seed: u64,
    image_size: usize,
    out: *mut *mut nriqa_dataset,
) -> nriqa_status {
    let out = ffi_try!(require_mut(out));
    if n == 0 || image_size == 0 {
        set_error("n and image_size must be positive");
        return NRIQA_DATA_ERROR;
    }
    let ds = synthesize_dataset(n, seed, image_size);
    *out = Box::into_raw(Box::new(nriqa_dataset { inner: ds }));
    NRIQA_OK
}

/// Number of images in the dataset; 0 if `ds` is NULL.
#[no_mangle]
pub extern "C" fn nriqa_dataset_len(ds: *const nriqa_dataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    unsafe { &*ds }.inner.len()
}

/// Releases a dataset handle. NULL is ignored.
#[no_mangle]
pub extern "C" fn nriqa_dataset_free(ds: *mut nriqa_dataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Trains the model in place on `ds`. `label_policy` is one of
/// `"auto"`, `"manifest"`, `"pseudo"`, `"off"`; NULL means `"auto"`.
/// `checkpoint_dir` (optional, NULL to skip) receives the best-validation
/// snapshot while training runs.
#[no_mangle]
pub extern "C" fn nriqa_train(
    model: *mut nriqa_model,
    ds: *const nriqa_dataset,
    label_policy: *const c_char,
    checkpoint_dir: *const c_char,
) -> nriqa_status {
    let model = ffi_try!(require_mut(model));
    let ds = ffi_try!(require(ds));
    let policy = if label_policy.is_null() {
        LabelPolicy::default()
    } else {
        let text = ffi_try!(unsafe { cstr(label_policy) });
        match text.parse::<LabelPolicy>() {
            Ok(p) => p,
            Err(e) => return fail(e),
        }
    };
    let opts = TrainOptions {
        label_policy: policy,
        checkpoint_dir: if checkpoint_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(ffi_try!(unsafe { cstr(checkpoint_dir) })))
        },
        ..TrainOptions::default()
    };
    let report = core_try!(train(&mut model.inner, &ds.inner, &opts));
    model.counters = TrainCounters {
        epoch: report.epochs.len() as u64,
        step: report.steps,
        best_val_metric: Some(report.best_val_metric),
        best_epoch: Some(report.best_epoch as u64),
        rng_seed: model.inner.cfg.seed,
    };
    NRIQA_OK
}

/// Scores one interleaved RGB image (row-major, 3 floats per pixel in
/// `[0, 1]`, `width * height * 3` elements). The crop sampler is seeded
/// with `seed`, so equal inputs give equal scores. The score lands in
/// `*out_score`.
#[no_mangle]
pub extern "C" fn nriqa_predict(
    model: *const nriqa_model,
    pixels: *const f32,
    width: usize,
    height: usize,
    seed: u64,
    out_score: *mut f64,
) -> nriqa_status {
    let model = ffi_try!(require(model));
    let out_score = ffi_try!(require_mut(out_score));
    if pixels.is_null() {
        set_error("pixels is NULL");
        return NRIQA_NULL_ARGUMENT;
    }
    if width == 0 || height == 0 {
        set_error("width and height must be positive");
        return NRIQA_DATA_ERROR;
    }
    let Some(len) = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
    else {
        set_error("width * height * 3 overflows");
        return NRIQA_DATA_ERROR;
    };
    let data = unsafe { std::slice::from_raw_parts(pixels, len) };
    let mut img = ImageBuf::new(width, height);
    img.data_mut().copy_from_slice(data);
    *out_score = core_try!(model.inner.predict(&img, seed));
    NRIQA_OK
}

/// Scores an image file (any format the decoder supports; PNG is what the
/// toolchain writes).
#[no_mangle]
pub extern "C" fn nriqa_predict_path(
    model: *const nriqa_model,
    path: *const c_char,
    seed: u64,
    out_score: *mut f64,
) -> nriqa_status {
    let model = ffi_try!(require(model));
    let out_score = ffi_try!(require_mut(out_score));
    let path = ffi_try!(unsafe { cstr(path) });
    let img = core_try!(ImageBuf::load(Path::new(path)));
    *out_score = core_try!(model.inner.predict(&img, seed));
    NRIQA_OK
}

/// Scores every image in `ds` and writes rank (SRCC) and linear (PLCC)
/// correlation against the dataset MOS.
#[no_mangle]
pub extern "C" fn nriqa_evaluate(
    model: *const nriqa_model,
    ds: *const nriqa_dataset,
    seed: u64,
    out_srcc: *mut f64,
    out_plcc: *mut f64,
) -> nriqa_status {
    let model = ffi_try!(require(model));
    let ds = ffi_try!(require(ds));
    let out_srcc = ffi_try!(require_mut(out_srcc));
    let out_plcc = ffi_try!(require_mut(out_plcc));
    let (s, p) = core_try!(evaluate(&model.inner, &ds.inner, seed));
    *out_srcc = s;
    *out_plcc = p;
    NRIQA_OK
}

/// Spearman rank correlation of two length-`n` arrays into `*out`.
#[no_mangle]
pub extern "C" fn nriqa_srcc(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
) -> nriqa_status {
    correlation(a, b, n, out, nriqa::metrics::srcc)
}

/// Pearson linear correlation of two length-`n` arrays into `*out`.
#[no_mangle]
pub extern "C" fn nriqa_plcc(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
) -> nriqa_status {
    correlation(a, b, n, out, nriqa::metrics::plcc)
}

fn correlation(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
    f: fn(&[f64], &[f64]) -> nriqa::error::Result<f64>,
) -> nriqa_status {
    let out = ffi_try!(require_mut(out));
    if a.is_null() || b.is_null() {
        set_error("input arrays must not be NULL");
        return NRIQA_NULL_ARGUMENT;
    }
    let (xs, ys) = unsafe {
        (
            std::slice::from_raw_parts(a, n),
            std::slice::from_raw_parts(b, n),
        )
    };
    *out = core_try!(f(xs, ys));
    NRIQA_OK
}
