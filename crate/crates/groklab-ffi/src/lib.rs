//! C ABI over the groklab core: opaque model handles, status codes for
//! every fallible call, and a thread-local last-error message. The build
//! script regenerates `include/groklab.h` from this file.
//!
//! Ownership rules are the usual ones: handles returned through out
//! parameters belong to the caller until passed to the matching `_free`;
//! strings returned through out parameters must be released with
//! `gl_string_free`; borrowed pointers are never stored.

use groklab::cli;
use groklab::diag;
use groklab::modspace::{enumerate_examples, ModTask, Op};
use groklab::net::{accuracy, load_checkpoint, MlpParams, Mode};
use groklab::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

/// Result of every fallible entry point. `GL_STATUS_OK` is zero; anything
/// else leaves a description in `gl_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer,
    /// A string argument was not valid UTF-8.
    Utf8,
    /// A value failed validation (bad op name, dimension mismatch, ...).
    InvalidArgument,
    /// The underlying file operation failed.
    Io,
    /// A file parsed but its contents are inconsistent.
    Corrupt,
    /// Training or evaluation hit a non-finite value.
    Numeric,
    /// An internal invariant failed; the library state is still sound.
    Panic,
}

/// Parameter block selector for spectral queries.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlBlock {
    /// The embedding table E.
    Embedding = 0,
    /// The first dense layer W1.
    FirstLayer = 1,
}

/// Shape summary of a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GlModelInfo {
    /// Modulus (number of output classes).
    pub p: u64,
    /// Vocabulary size, p + 2.
    pub vocab: u64,
    /// Embedding dimension; 0 in no-embed mode.
    pub d: u64,
    /// Hidden width.
    pub h: u64,
    /// True when the model has an embedding table.
    pub with_embed: bool,
}

/// Opaque handle to a loaded model checkpoint.
pub struct GlModel {
    params: MlpParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("error message had NUL").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: GlStatus, msg: impl Into<Vec<u8>>) -> GlStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> GlStatus {
    match e {
        Error::InvalidConfig(_) | Error::NotPrime(_) | Error::ShapeMismatch(_) => {
            GlStatus::InvalidArgument
        }
        Error::NonFinite { .. } => GlStatus::Numeric,
        Error::CorruptFile { .. } | Error::ParseError { .. } => GlStatus::Corrupt,
        Error::Io { .. } => GlStatus::Io,
    }
}

fn from_result<T>(r: Result<T, Error>) -> Result<T, GlStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

/// Runs a body with panic containment so unwinding never crosses the ABI.
fn guard(f: impl FnOnce() -> GlStatus) -> GlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(GlStatus::Panic, "internal panic; see stderr for details"),
    }
}

/// Converts a C path argument, reporting null/UTF-8 problems.
///
/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn path_arg(ptr: *const c_char, what: &str) -> Result<PathBuf, GlStatus> {
    if ptr.is_null() {
        return Err(fail(GlStatus::NullPointer, format!("{what} is null")));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(GlStatus::Utf8, format!("{what} is not valid UTF-8"))),
    }
}

/// Message describing the most recent failure on this thread, or null if
/// none. The pointer stays valid until the next failing call on the same
/// thread; do not free it.
#[no_mangle]
pub extern "C" fn gl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Loads a model checkpoint written by the `groklab train` command.
/// On success `*out` owns the handle; release it with `gl_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gl_model_load(path: *const c_char, out: *mut *mut GlModel) -> GlStatus {
    guard(|| {
        if out.is_null() {
            return fail(GlStatus::NullPointer, "out handle is null");
        }
        let path = match path_arg(path, "checkpoint path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match from_result(load_checkpoint(&path)) {
            Ok(params) => {
                *out = Box::into_raw(Box::new(GlModel { params }));
                GlStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Releases a model handle. Null is a no-op.
///
/// # Safety
/// `model` must be null or a handle previously returned by
/// `gl_model_load`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_model_free(model: *mut GlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reports the model's dimensions.
///
/// # Safety
/// `model` must be a live handle; `info` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gl_model_info(model: *const GlModel, info: *mut GlModelInfo) -> GlStatus {
    guard(|| {
        if model.is_null() || info.is_null() {
            return fail(GlStatus::NullPointer, "model or info is null");
        }
        let cfg = &(*model).params.config;
        *info = GlModelInfo {
            p: cfg.p as u64,
            vocab: cfg.vocab as u64,
            d: cfg.d as u64,
            h: cfg.h as u64,
            with_embed: cfg.mode == Mode::WithEmbed,
        };
        GlStatus::Ok
    })
}

/// Accuracy of the model over the full enumeration of the named task
/// (`"add"`, `"mul"`, `"div"`, `"sumsquares"`) at the model's modulus.
///
/// # Safety
/// `model` must be a live handle; `op` a NUL-terminated string; `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gl_model_accuracy(
    model: *const GlModel,
    op: *const c_char,
    out: *mut f64,
) -> GlStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(GlStatus::NullPointer, "model or out is null");
        }
        if op.is_null() {
            return fail(GlStatus::NullPointer, "op is null");
        }
        let op = match CStr::from_ptr(op).to_str() {
            Ok(s) => s,
            Err(_) => return fail(GlStatus::Utf8, "op is not valid UTF-8"),
        };
        let params = &(*model).params;
        let result = op
            .parse::<Op>()
            .and_then(|op| ModTask::new(op, params.config.p as u64))
            .and_then(|task| accuracy(params, &enumerate_examples(&task)));
        match from_result(result) {
            Ok(acc) => {
                *out = acc;
                GlStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Largest singular value of the selected parameter block.
///
/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gl_model_sigma_max(
    model: *const GlModel,
    block: GlBlock,
    out: *mut f64,
) -> GlStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(GlStatus::NullPointer, "model or out is null");
        }
        let params = &(*model).params;
        let m = match block {
            GlBlock::Embedding => match &params.e {
                Some(e) => e,
                None => {
                    return fail(
                        GlStatus::InvalidArgument,
                        "model has no embedding table (no-embed mode)",
                    )
                }
            },
            GlBlock::FirstLayer => &params.w1,
        };
        *out = diag::sigma_max(m);
        GlStatus::Ok
    })
}

/// DFT magnitude spectrum of the operand embedding rows: the first
/// ceil(p/2) per-frequency norms. Query the required length by passing a
/// null `out` (only `*written` is set); otherwise `capacity` must be at
/// least that length.
///
/// # Safety
/// `model` must be a live handle; `written` a valid pointer; `out` null or
/// valid for `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn gl_model_fft(
    model: *const GlModel,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> GlStatus {
    guard(|| {
        if model.is_null() || written.is_null() {
            return fail(GlStatus::NullPointer, "model or written is null");
        }
        let params = &(*model).params;
        let needed = params.config.p.div_ceil(2);
        if out.is_null() {
            *written = needed;
            return GlStatus::Ok;
        }
        if capacity < needed {
            return fail(
                GlStatus::InvalidArgument,
                format!("capacity {capacity} is below the spectrum length {needed}"),
            );
        }
        let e = match &params.e {
            Some(e) => e,
            None => {
                return fail(
                    GlStatus::InvalidArgument,
                    "model has no embedding table (no-embed mode)",
                )
            }
        };
        match from_result(diag::fft_spectrum(e, params.config.p)) {
            Ok(spectrum) => {
                std::ptr::copy_nonoverlapping(spectrum.as_ptr(), out, spectrum.len());
                *written = spectrum.len();
                GlStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Runs one training job from a flat `key = value` config file (the same
/// format the CLI accepts). `out_dir` overrides the file's `out` key when
/// non-null. On success, when `run_dir` is non-null it receives the run
/// directory path; release it with `gl_string_free`.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_dir` null or the
/// same; `run_dir` null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gl_train_file(
    config_path: *const c_char,
    out_dir: *const c_char,
    run_dir: *mut *mut c_char,
) -> GlStatus {
    guard(|| {
        let config_path = match path_arg(config_path, "config path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let out_override = if out_dir.is_null() {
            None
        } else {
            match path_arg(out_dir, "out dir") {
                Ok(p) => Some(p),
                Err(s) => return s,
            }
        };
        match from_result(cli::train_from_config_file(
            &config_path,
            out_override.as_deref(),
        )) {
            Ok(dir) => {
                if !run_dir.is_null() {
                    let c = CString::new(dir.to_string_lossy().into_owned())
                        .unwrap_or_else(|_| CString::new("").unwrap());
                    *run_dir = c.into_raw();
                }
                GlStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Releases a string returned through an out parameter. Null is a no-op.
///
/// # Safety
/// `s` must be null or a string previously returned by this library, not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn gl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
