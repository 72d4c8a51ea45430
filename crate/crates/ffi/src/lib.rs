//! C ABI for `tailor-core`.
//!
//! Every fallible function returns a [`TailorStatus`]; on failure the message
//! is available from [`tailor_last_error`] on the same thread. Strings handed
//! out by the library are freed with [`tailor_string_free`]. Training runs
//! are opaque [`TailorRun`] handles released with [`tailor_run_free`].
//!
//! Images are `float64` planes in channel-major order (`c * h * w`), masks are
//! `uint8` grids (`h * w`, 0 or 1).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ndarray::{Array2, Array3};
use tailor_core::config::{self, RunConfig};
use tailor_core::dataset::PairSpec;
use tailor_core::degradation::{self, DegradationMode, DegradationSchedule};
use tailor_core::dual_stream::StepLossReport;
use tailor_core::evaluation::prompts;
use tailor_core::losses::{self, PerSampleLoss, Reduction};
use tailor_core::{run, trainer, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailorStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    BackendUnavailable = 5,
    Checkpoint = 6,
    Runtime = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailorDegradationMode {
    Dynamic = 0,
    Fixed = 1,
    LinearAscent = 2,
    LinearDescent = 3,
    Off = 4,
    MaskOut = 5,
}

fn degradation_mode(raw: i32) -> Result<DegradationMode, Failure> {
    const MODES: [(TailorDegradationMode, DegradationMode); 6] = [
        (TailorDegradationMode::Dynamic, DegradationMode::Dynamic),
        (TailorDegradationMode::Fixed, DegradationMode::Fixed),
        (TailorDegradationMode::LinearAscent, DegradationMode::LinearAscent),
        (TailorDegradationMode::LinearDescent, DegradationMode::LinearDescent),
        (TailorDegradationMode::Off, DegradationMode::Off),
        (TailorDegradationMode::MaskOut, DegradationMode::MaskOut),
    ];
    MODES
        .iter()
        .find(|(c, _)| *c as i32 == raw)
        .map(|&(_, m)| m)
        .ok_or_else(|| Failure::new(TailorStatus::InvalidArgument, format!("unknown degradation mode {raw}")))
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailorReduction {
    FullGrid = 0,
    MaskArea = 1,
}

fn reduction(raw: i32) -> Result<Reduction, Failure> {
    match raw {
        r if r == TailorReduction::FullGrid as i32 => Ok(Reduction::FullGrid),
        r if r == TailorReduction::MaskArea as i32 => Ok(Reduction::MaskArea),
        _ => Err(Failure::new(TailorStatus::InvalidArgument, format!("unknown reduction {raw}"))),
    }
}

/// A resolved run configuration with its pair, plus the trace once trained.
pub struct TailorRun {
    config: RunConfig,
    pair: PairSpec,
    reports: Vec<StepLossReport>,
}

struct Failure {
    status: TailorStatus,
    message: String,
}

impl Failure {
    fn new(status: TailorStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config { .. } | Error::Yaml(_) => TailorStatus::Config,
            Error::Io { .. } | Error::Ingestion { .. } | Error::Image { .. } => TailorStatus::Io,
            Error::BackendUnavailable(_) => TailorStatus::BackendUnavailable,
            Error::Checkpoint(_) => TailorStatus::Checkpoint,
            Error::Shape(_) | Error::Schedule(_) | Error::Mask { .. } | Error::Loss(_) | Error::Evaluation(_) => {
                TailorStatus::InvalidArgument
            }
            _ => TailorStatus::Runtime,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TailorStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TailorStatus::Ok,
        Ok(Err(fail)) => {
            set_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            TailorStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(TailorStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(TailorStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::new(TailorStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| Failure::new(TailorStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn c_string(s: &str) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::new(TailorStatus::Runtime, "string contains a nul byte"))
}

fn shape_len(dims: &[usize]) -> Result<usize, Failure> {
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::new(TailorStatus::InvalidArgument, format!("invalid shape {dims:?}")))
}

unsafe fn planes(p: *const f64, c: usize, h: usize, w: usize, what: &str) -> Result<Array3<f64>, Failure> {
    let data = slice(p, shape_len(&[c, h, w])?, what)?;
    Ok(Array3::from_shape_vec((c, h, w), data.to_vec()).expect("length checked"))
}

unsafe fn mask(p: *const u8, h: usize, w: usize) -> Result<Array2<u8>, Failure> {
    let data = slice(p, shape_len(&[h, w])?, "mask")?;
    Ok(Array2::from_shape_vec((h, w), data.to_vec()).expect("length checked"))
}

/// Library version, a static nul-terminated string.
#[no_mangle]
pub extern "C" fn tailor_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next library call on the same thread.
#[no_mangle]
pub extern "C" fn tailor_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tailor_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default schedule length for the given stage lengths.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tailor_schedule_length(warmup_steps: usize, dsbal_steps: usize, out: *mut usize) -> TailorStatus {
    guard(|| {
        *self::out(out, "out")? = trainer::schedule_length(warmup_steps, dsbal_steps);
        Ok(())
    })
}

/// Degradation intensity at step `d` of a schedule. `mode` is a
/// `TailorDegradationMode` value.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tailor_schedule_intensity(
    mode: i32,
    alpha_init: f64,
    gamma: f64,
    fixed_alpha: f64,
    total_steps: usize,
    d: i64,
    out: *mut f64,
) -> TailorStatus {
    guard(|| {
        let s = DegradationSchedule {
            mode: degradation_mode(mode)?,
            alpha_init,
            gamma,
            fixed_alpha,
            total_steps,
        };
        s.validate()?;
        *self::out(out, "out")? = s.intensity(d)?;
        Ok(())
    })
}

/// Noise seed of image `image` of sample `sample` at step `step`.
#[no_mangle]
pub extern "C" fn tailor_noise_seed(global_seed: u64, step: usize, sample: usize, image: usize) -> u64 {
    degradation::noise_seed(global_seed, step, sample, image)
}

/// Adds `alpha` times seeded Gaussian noise outside the mask. `image` and
/// `out` hold `channels * height * width` values; they may alias.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tailor_degrade(
    image: *const f64,
    mask: *const u8,
    channels: usize,
    height: usize,
    width: usize,
    alpha: f64,
    seed: u64,
    out: *mut f64,
) -> TailorStatus {
    guard(|| {
        let img = planes(image, channels, height, width, "image")?;
        let m = self::mask(mask, height, width)?;
        let d = degradation::degrade(&img, &m, alpha, seed, 0)?;
        if out.is_null() {
            return Err(Failure::new(TailorStatus::NullPointer, "out is null"));
        }
        let dst = std::slice::from_raw_parts_mut(out, d.pixels.len());
        dst.copy_from_slice(d.pixels.as_slice().expect("standard layout"));
        Ok(())
    })
}

/// Masked squared error between `target` and `pred` (`channels * height * width`).
/// `reduction` is a `TailorReduction` value.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tailor_masked_diffusion_loss(
    target: *const f64,
    pred: *const f64,
    mask: *const u8,
    channels: usize,
    height: usize,
    width: usize,
    reduction: i32,
    out: *mut f64,
) -> TailorStatus {
    guard(|| {
        let t = planes(target, channels, height, width, "target")?;
        let p = planes(pred, channels, height, width, "pred")?;
        let m = self::mask(mask, height, width)?;
        *self::out(out, "out")? = losses::masked_diffusion_loss(&t, &p, &m, self::reduction(reduction)?)?;
        Ok(())
    })
}

/// Cross-attention loss of a normalized `height * width` map against a mask.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn tailor_cross_attention_loss(
    attn: *const f64,
    mask: *const u8,
    height: usize,
    width: usize,
    out: *mut f64,
) -> TailorStatus {
    guard(|| {
        let data = slice(attn, shape_len(&[height, width])?, "attn")?;
        let a = Array2::from_shape_vec((height, width), data.to_vec()).expect("length checked");
        let m = self::mask(mask, height, width)?;
        *self::out(out, "out")? = losses::cross_attention_loss(&a, &m)?;
        Ok(())
    })
}

/// Largest of `n` per-sample losses. `index` receives the 1-based sample;
/// ties go to the smallest index.
///
/// # Safety
/// `losses` must hold `n` values; `index` and `value` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn tailor_diff_max(losses: *const f64, n: usize, index: *mut usize, value: *mut f64) -> TailorStatus {
    guard(|| {
        let per: Vec<PerSampleLoss> = slice(losses, n, "losses")?
            .iter()
            .enumerate()
            .map(|(i, &v)| PerSampleLoss {
                sample: i + 1,
                value: v,
                images: 1,
            })
            .collect();
        let (i, v) = losses::diff_max(&per)?;
        *self::out(index, "index")? = i;
        *self::out(value, "value")? = v;
        Ok(())
    })
}

/// Renders an evaluation prompt template with `"<first> with <second>"`.
/// The result is freed with [`tailor_string_free`].
///
/// # Safety
/// Strings must be nul-terminated; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tailor_render_prompt(
    template: *const c_char,
    first: *const c_char,
    second: *const c_char,
    out: *mut *mut c_char,
) -> TailorStatus {
    guard(|| {
        let s = prompts::render_with(&string(template, "template")?, &string(first, "first")?, &string(second, "second")?)?;
        *self::out(out, "out")? = c_string(&s)?;
        Ok(())
    })
}

/// Resolves a run: optional YAML config file plus `n` dotted `keys[i] = values[i]`
/// overrides. On success `*out` owns a handle.
///
/// # Safety
/// `config_path` may be null; `keys` and `values` must hold `n` strings.
#[no_mangle]
pub unsafe extern "C" fn tailor_run_open(
    config_path: *const c_char,
    keys: *const *const c_char,
    values: *const *const c_char,
    n: usize,
    out: *mut *mut TailorRun,
) -> TailorStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = std::ptr::null_mut();
        let path = if config_path.is_null() {
            None
        } else {
            Some(PathBuf::from(string(config_path, "config_path")?))
        };
        let keys = slice(keys, n, "keys")?;
        let values = slice(values, n, "values")?;
        let overrides = keys
            .iter()
            .zip(values)
            .map(|(&k, &v)| Ok((string(k, "key")?, string(v, "value")?)))
            .collect::<Result<Vec<_>, Failure>>()?;
        let file = path.as_deref().map(config::read_config_file).transpose()?;
        let mut cfg = config::resolve(file.as_ref(), &overrides)?;
        let pair = run::load_run_pair(&mut cfg, path.as_deref().zip(file.as_ref()))?;
        *slot = Box::into_raw(Box::new(TailorRun {
            config: cfg,
            pair,
            reports: Vec::new(),
        }));
        Ok(())
    })
}

/// Hex config hash of the run. Freed with [`tailor_string_free`].
///
/// # Safety
/// `run` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tailor_run_config_hash(run: *const TailorRun, out: *mut *mut c_char) -> TailorStatus {
    guard(|| {
        let r = run
            .as_ref()
            .ok_or_else(|| Failure::new(TailorStatus::NullPointer, "run is null"))?;
        *self::out(out, "out")? = c_string(&r.config.hash(&r.pair))?;
        Ok(())
    })
}

/// Trains the run and writes its run directory, whose path goes to `out`
/// (freed with [`tailor_string_free`]).
///
/// # Safety
/// `run` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tailor_run_train(run: *mut TailorRun, out: *mut *mut c_char) -> TailorStatus {
    guard(|| {
        let r = run
            .as_mut()
            .ok_or_else(|| Failure::new(TailorStatus::NullPointer, "run is null"))?;
        let slot = self::out(out, "out")?;
        let mut backbone = run::build_backbone(&r.config, &r.pair)?;
        let res = run::train_run(&r.config, r.pair.clone(), &mut backbone, None)?;
        r.reports = res.reports;
        *slot = c_string(&res.dir.display().to_string())?;
        Ok(())
    })
}

/// Copies up to `capacity` per-step total losses of the last training into
/// `buf`; `len` receives the full trace length.
///
/// # Safety
/// `run` must be a live handle; `buf` valid for `capacity` values; `len` valid.
#[no_mangle]
pub unsafe extern "C" fn tailor_run_loss_trace(
    run: *const TailorRun,
    buf: *mut f64,
    capacity: usize,
    len: *mut usize,
) -> TailorStatus {
    guard(|| {
        let r = run
            .as_ref()
            .ok_or_else(|| Failure::new(TailorStatus::NullPointer, "run is null"))?;
        *self::out(len, "len")? = r.reports.len();
        let n = capacity.min(r.reports.len());
        if n > 0 {
            if buf.is_null() {
                return Err(Failure::new(TailorStatus::NullPointer, "buf is null"));
            }
            let dst = std::slice::from_raw_parts_mut(buf, n);
            for (d, rep) in dst.iter_mut().zip(&r.reports) {
                *d = rep.total;
            }
        }
        Ok(())
    })
}

/// Releases a run handle. Null is ignored.
///
/// # Safety
/// `run` must come from [`tailor_run_open`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tailor_run_free(run: *mut TailorRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
