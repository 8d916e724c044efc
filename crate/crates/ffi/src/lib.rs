//! C ABI over `adl-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new` / `*_load`
//! and released by the matching `*_free`. Every fallible call returns an
//! [`AdlStatus`]; on failure the message is kept per thread and can be read
//! with [`adl_last_error`]. Panics never unwind into C: they surface as
//! `ADL_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use adl_core::config::RunConfig;
use adl_core::denoiser::ModelParams;
use adl_core::error::ErrorCategory;
use adl_core::metrics::{dice, ms_ssim, SsimParams};
use adl_core::numerics::Tensor;
use adl_core::pipeline::{Run, Stage};
use adl_core::sampler::sample;
use adl_core::trainer::checkpoint::{load_adapters, load_checkpoint};
use adl_core::Error;

/// Result of every fallible call. Values match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Corrupt = 3,
    Numerical = 4,
    Leakage = 5,
    MissingArtifact = 6,
    Config = 7,
    Io = 8,
    Internal = 9,
}

impl From<ErrorCategory> for AdlStatus {
    fn from(c: ErrorCategory) -> Self {
        match c {
            ErrorCategory::InvalidArgument => AdlStatus::InvalidArgument,
            ErrorCategory::Corrupt => AdlStatus::Corrupt,
            ErrorCategory::Numerical => AdlStatus::Numerical,
            ErrorCategory::Leakage => AdlStatus::Leakage,
            ErrorCategory::MissingArtifact => AdlStatus::MissingArtifact,
            ErrorCategory::Config => AdlStatus::Config,
            ErrorCategory::Io => AdlStatus::Io,
        }
    }
}

/// Resolved run configuration.
pub struct AdlConfig(RunConfig);

/// A denoiser, optionally with adapters attached.
pub struct AdlModel(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(AdlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(e.category().into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(AdlStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AdlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdlStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".to_string());
            AdlStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(AdlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

/// Message of the last failed call on this thread; empty if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn adl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New configuration holding every default.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn adl_config_new(out: *mut *mut AdlConfig) -> AdlStatus {
    guard(|| put(out, AdlConfig(RunConfig::default())))
}

/// Configuration parsed from a file; unspecified keys keep their defaults.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as for [`adl_config_new`].
#[no_mangle]
pub unsafe extern "C" fn adl_config_load(path: *const c_char, out: *mut *mut AdlConfig) -> AdlStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        put(out, AdlConfig(RunConfig::load(std::path::Path::new(p))?))
    })
}

/// Sets `section.key = value`; rejected values leave the config unchanged.
///
/// # Safety
/// `cfg` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn adl_config_set(
    cfg: *mut AdlConfig,
    section: *const c_char,
    key: *const c_char,
    value: *const c_char,
) -> AdlStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let (s, k, v) = (str_arg(section, "section")?, str_arg(key, "key")?, str_arg(value, "value")?);
        cfg.0.set(s, k, v)?;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adl_config_free(cfg: *mut AdlConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs one pipeline stage (`gen-data`, `train-base`, ...) in `run_dir`.
///
/// # Safety
/// `cfg` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn adl_run_stage(cfg: *const AdlConfig, run_dir: *const c_char, stage: *const c_char) -> AdlStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let dir = PathBuf::from(str_arg(run_dir, "run_dir")?);
        let name = str_arg(stage, "stage")?;
        let stage = Stage::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Fail(AdlStatus::InvalidArgument, format!("unknown stage {name:?}")))?;
        Run::new(dir, cfg.0.clone()).run_stage(stage)?;
        Ok(())
    })
}

/// Loads a base checkpoint, then adapters from `adapters_path` unless it is null.
///
/// # Safety
/// Paths must be NUL-terminated (`adapters_path` may be null); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adl_model_load(
    base_path: *const c_char,
    adapters_path: *const c_char,
    out: *mut *mut AdlModel,
) -> AdlStatus {
    guard(|| {
        let base = load_checkpoint(std::path::Path::new(str_arg(base_path, "base_path")?))?;
        let model = if adapters_path.is_null() {
            base
        } else {
            load_adapters(&base, std::path::Path::new(str_arg(adapters_path, "adapters_path")?))?
        };
        put(out, AdlModel(model))
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adl_model_free(model: *mut AdlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Draws sample `index` of class `class_id` with the sampler settings in `cfg`.
/// Writes `size × size` pixels in `[0, 1]`, row-major, where `size` is `data.size`.
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn adl_sample(
    model: *const AdlModel,
    cfg: *const AdlConfig,
    class_id: u8,
    index: u64,
    out: *mut f64,
    len: usize,
) -> AdlStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut sc = cfg.0.sampler(class_id)?;
        sc.stream += index;
        let want = sc.height * sc.width;
        if len != want {
            return Err(Fail(AdlStatus::InvalidArgument, format!("buffer holds {len} values, sample needs {want}")));
        }
        let img = sample(&model.0, &cfg.0.schedule()?, &sc)?.image;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(img.data());
        Ok(())
    })
}

/// MS-SSIM of two `height × width` images with default parameters.
///
/// # Safety
/// `a` and `b` must hold `height * width` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adl_ms_ssim(a: *const f64, b: *const f64, height: usize, width: usize, out: *mut f64) -> AdlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let n = height.checked_mul(width).ok_or_else(|| Fail(AdlStatus::InvalidArgument, "size overflow".into()))?;
        let ta = Tensor::new(vec![height, width], slice_arg(a, n, "a")?.to_vec())?;
        let tb = Tensor::new(vec![height, width], slice_arg(b, n, "b")?.to_vec())?;
        *out = ms_ssim(&ta, &tb, &SsimParams::default())?;
        Ok(())
    })
}

/// Dice overlap of `label` between two label masks of length `len`.
///
/// # Safety
/// `pred` and `truth` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adl_dice(pred: *const u8, truth: *const u8, len: usize, label: u8, out: *mut f64) -> AdlStatus {
    guard(|| {
        if pred.is_null() || truth.is_null() || out.is_null() {
            return Err(null("pred, truth or out"));
        }
        let (p, t) = (std::slice::from_raw_parts(pred, len), std::slice::from_raw_parts(truth, len));
        *out = dice(p, t, label)?;
        Ok(())
    })
}
