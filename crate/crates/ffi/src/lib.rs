//! C ABI for the simulator.
//!
//! Every fallible function returns a [`RebaflStatus`]; on failure the
//! message is available from [`rebafl_last_error`] on the same thread.
//! Strings returned through `char**` out-parameters must be released with
//! [`rebafl_string_free`], run handles with [`rebafl_run_free`].

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rebafl::config::ExperimentConfig;
use rebafl::experiment::{data_root, Run};
use rebafl::losses::{rbsm_loss, smoothed_prior};
use rebafl::matrix::Matrix;
use rebafl::metrics::rounds_csv;
use rebafl::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RebaflStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Invalid configuration or argument value.
    Config = 2,
    /// Dataset, partition or file-format problem.
    Data = 3,
    /// Non-finite values or an ill-posed loss.
    Numerical = 4,
    Io = 5,
    /// Invalid UTF-8 in a string argument.
    Utf8 = 6,
    /// Internal error or caught panic.
    Internal = 7,
}

/// One round of a run.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RebaflRoundInfo {
    pub round: usize,
    pub active_count: usize,
    pub accuracy: f64,
    pub diversity: f64,
    pub skipped: bool,
}

/// Opaque simulation handle.
pub struct RebaflRun {
    run: Run,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> RebaflStatus {
    match err {
        Error::Config(_) | Error::Shape { .. } | Error::InvalidClient(_) => RebaflStatus::Config,
        Error::Data(_) | Error::Format { .. } | Error::Partition(_) | Error::Json(_) => RebaflStatus::Data,
        Error::DegenerateLoss { .. } | Error::IllConditioned { .. } | Error::NonFinite(_) => RebaflStatus::Numerical,
        Error::Io { .. } => RebaflStatus::Io,
        _ => RebaflStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), RebaflStatus>) -> RebaflStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RebaflStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic");
            RebaflStatus::Internal
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, RebaflStatus>;
}

impl<T> OrStatus<T> for rebafl::Result<T> {
    fn or_status(self) -> Result<T, RebaflStatus> {
        self.map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), RebaflStatus> {
    if p.is_null() {
        set_error(format!("`{name}` is null"));
        Err(RebaflStatus::NullArgument)
    } else {
        Ok(())
    }
}

unsafe fn read_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, RebaflStatus> {
    non_null(p, name)?;
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("`{name}` is not valid UTF-8"));
        RebaflStatus::Utf8
    })
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), RebaflStatus> {
    let c = CString::new(s).map_err(|_| {
        set_error("string contains an interior NUL");
        RebaflStatus::Internal
    })?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rebafl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rebafl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn rebafl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Create a run from a JSON experiment config. `data_root_dir` may be null to
/// use `$REBAFL_DATA_DIR` or `./data`.
#[no_mangle]
pub unsafe extern "C" fn rebafl_run_new(config_json: *const c_char, data_root_dir: *const c_char, out: *mut *mut RebaflRun) -> RebaflStatus {
    guard(|| {
        non_null(out, "out")?;
        let json = read_str(config_json, "config_json")?;
        let root = if data_root_dir.is_null() {
            data_root()
        } else {
            PathBuf::from(read_str(data_root_dir, "data_root")?)
        };
        let cfg = ExperimentConfig::from_json(json).or_status()?;
        let (run, _) = Run::prepare(&cfg, &root).or_status()?;
        *out = Box::into_raw(Box::new(RebaflRun { run }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn rebafl_run_free(run: *mut RebaflRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Execute one round. Sets `*finished` and leaves `*info` untouched once
/// all configured rounds have run.
#[no_mangle]
pub unsafe extern "C" fn rebafl_run_step(run: *mut RebaflRun, info: *mut RebaflRoundInfo, finished: *mut bool) -> RebaflStatus {
    guard(|| {
        non_null(run, "run")?;
        non_null(info, "info")?;
        non_null(finished, "finished")?;
        match (*run).run.step().or_status()? {
            Some(r) => {
                *info = RebaflRoundInfo {
                    round: r.round,
                    active_count: r.active.len(),
                    accuracy: r.accuracy,
                    diversity: r.diversity,
                    skipped: r.skipped,
                };
                *finished = false;
            }
            None => *finished = true,
        }
        Ok(())
    })
}

/// Number of rounds completed so far.
#[no_mangle]
pub unsafe extern "C" fn rebafl_run_rounds_done(run: *const RebaflRun) -> usize {
    if run.is_null() {
        0
    } else {
        (*run).run.rounds_done()
    }
}

/// Round log as CSV (`round,active_count,accuracy,diversity,skipped`).
#[no_mangle]
pub unsafe extern "C" fn rebafl_run_rounds_csv(run: *const RebaflRun, out: *mut *mut c_char) -> RebaflStatus {
    guard(|| {
        non_null(run, "run")?;
        non_null(out, "out")?;
        give_string(rounds_csv((*run).run.history()), out)
    })
}

/// Current global model and prototypes as a JSON checkpoint.
#[no_mangle]
pub unsafe extern "C" fn rebafl_run_checkpoint_json(run: *const RebaflRun, out: *mut *mut c_char) -> RebaflStatus {
    guard(|| {
        non_null(run, "run")?;
        non_null(out, "out")?;
        give_string((*run).run.checkpoint_json(), out)
    })
}

/// Smoothed label prior of `classes` counts into `out[classes]`.
#[no_mangle]
pub unsafe extern "C" fn rebafl_smoothed_prior(counts: *const usize, classes: usize, epsilon: f64, out: *mut f64) -> RebaflStatus {
    guard(|| {
        non_null(counts, "counts")?;
        non_null(out, "out")?;
        let counts = std::slice::from_raw_parts(counts, classes);
        let prior = smoothed_prior(counts, epsilon).or_status()?;
        std::slice::from_raw_parts_mut(out, classes).copy_from_slice(prior.smoothed());
        Ok(())
    })
}

/// Mean relaxed balanced-softmax loss of row-major `logits[rows * classes]`
/// under the smoothed prior of `counts[classes]`. When `grad` is non-null
/// it receives dL/dlogits (`rows * classes` values).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rebafl_rbsm_loss(
    logits: *const f64,
    rows: usize,
    classes: usize,
    labels: *const usize,
    counts: *const usize,
    epsilon: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> RebaflStatus {
    guard(|| {
        non_null(logits, "logits")?;
        non_null(labels, "labels")?;
        non_null(counts, "counts")?;
        non_null(loss, "loss")?;
        let z = Matrix::from_vec(rows, classes, std::slice::from_raw_parts(logits, rows * classes).to_vec()).or_status()?;
        let labels = std::slice::from_raw_parts(labels, rows);
        let prior = smoothed_prior(std::slice::from_raw_parts(counts, classes), epsilon).or_status()?;
        let r = rbsm_loss(&z, labels, &prior).or_status()?;
        *loss = r.value;
        if !grad.is_null() {
            std::slice::from_raw_parts_mut(grad, rows * classes).copy_from_slice(r.dl_dz.as_slice());
        }
        Ok(())
    })
}
