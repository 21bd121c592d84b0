//! C ABI for noiseadapt.
//!
//! Every function returns a [`NaStatus`]. On failure a message is kept per
//! thread and can be copied out with [`na_last_error_message`]. Objects are
//! opaque handles created by `*_new`/`*_load`/`*_run` functions and released
//! with the matching `*_free`; passing NULL to a `*_free` is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use noiseadapt::config::RunConfig;
use noiseadapt::data::{generate_stream, write_csv, VideoClip};
use noiseadapt::diffcore::Tensor;
use noiseadapt::diffusion::NoiseSchedule;
use noiseadapt::models::ModelBundle;
use noiseadapt::noiseopt::{Adapter, LossBreakdown, LossMode, NoiseState, PendingPrediction};
use noiseadapt::pipeline::load_models;
use noiseadapt::stream::{run_stream, should_optimize, StreamRun, Variant};
use noiseadapt::Error;
use rand_chacha::ChaCha8Rng;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Io = 4,
    Shape = 5,
    Numeric = 6,
    Precondition = 7,
    Panic = 8,
}

impl From<&Error> for NaStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } | Error::BadMagic | Error::ShapeOverflow(_) => NaStatus::Io,
            Error::ShapeMismatch { .. } | Error::DimensionMismatch(..) | Error::FrameTooSmall { .. } => NaStatus::Shape,
            Error::NonFiniteValue { .. }
            | Error::NonFiniteGradient
            | Error::NegativeRadicand(_)
            | Error::DivergedTraining { .. }
            | Error::EigenFailure
            | Error::NonDeterministicSegment(_) => NaStatus::Numeric,
            Error::Precondition(_) | Error::StreamTooShort(_) | Error::TooFewSamples(_) | Error::DoubleBackward => {
                NaStatus::Precondition
            }
            _ => NaStatus::InvalidConfig,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(NaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(NaStatus::from(&e), format!("{}: {e}", e.class()))
    }
}

fn null(what: &str) -> Fail {
    Fail(NaStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            NaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            NaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(NaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length in bytes.
/// The message is empty after a successful call.
///
/// # Safety
/// `buf` must be NULL or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn na_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

// ------------------------------------------------------------------ config

/// Run configuration (opaque).
pub struct NaConfig(RunConfig);

impl NaConfig {
    /// The wrapped configuration, for Rust callers.
    pub fn inner(&self) -> &RunConfig {
        &self.0
    }
}

/// New configuration holding the documented defaults.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn na_config_new(out: *mut *mut NaConfig) -> NaStatus {
    guard(|| {
        *out_arg(out, "out")? = Box::into_raw(Box::new(NaConfig(RunConfig::default())));
        Ok(())
    })
}

/// Parse `key = value` text on top of the defaults.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn na_config_parse(text: *const c_char, out: *mut *mut NaConfig) -> NaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = RunConfig::parse(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(NaConfig(c)));
        Ok(())
    })
}

/// Set one key; the config is validated afterwards and left unchanged on error.
///
/// # Safety
/// `config` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn na_config_set(config: *mut NaConfig, key: *const c_char, value: *const c_char) -> NaStatus {
    guard(|| {
        let c = out_arg(config, "config")?;
        let mut next = c.0.clone();
        next.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        next.validate()?;
        c.0 = next;
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn na_config_free(config: *mut NaConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

// ------------------------------------------------------------------ models

/// Trained networks and schedule (opaque).
pub struct NaModels {
    bundle: ModelBundle,
    schedule: NoiseSchedule,
}

/// Load the parameter files in `dir` for the model shape of `config`.
///
/// # Safety
/// `config` must come from this library, `dir` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn na_models_load(config: *const NaConfig, dir: *const c_char, out: *mut *mut NaModels) -> NaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = ref_arg(config, "config")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let (bundle, schedule) = load_models(&dir, c.0.train.model)?;
        *out = Box::into_raw(Box::new(NaModels { bundle, schedule }));
        Ok(())
    })
}

/// Number of f64 values in one clip (`frames * height * width`).
///
/// # Safety
/// `models` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn na_models_clip_len(models: *const NaModels, out: *mut usize) -> NaStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(models, "models")?.bundle.config().clip.numel();
        Ok(())
    })
}

/// # Safety
/// `models` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn na_models_free(models: *mut NaModels) {
    if !models.is_null() {
        drop(Box::from_raw(models));
    }
}

// ------------------------------------------------------------------ runs

/// Aggregates of a finished stream.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NaSummary {
    pub steps: usize,
    pub adapt_count: usize,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub mean_boundary: f64,
    pub mean_loss_total: f64,
    pub frechet: f64,
    pub mean_predict_secs: f64,
    pub mean_adapt_secs: f64,
}

/// Metrics of one stream step. `loss_latent` is NaN outside latent mode.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NaStep {
    pub step: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub boundary: f64,
    pub loss_pixel: f64,
    pub loss_feature: f64,
    pub loss_latent: f64,
    pub loss_total: f64,
    pub adapted: bool,
    pub prediction_hash: u64,
}

/// A finished stream evaluation (opaque).
pub struct NaRun(StreamRun);

/// Generate the configured stream and run the configured variant over it.
///
/// # Safety
/// `models` and `config` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn na_run_stream(models: *const NaModels, config: *const NaConfig, out: *mut *mut NaRun) -> NaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = ref_arg(models, "models")?;
        let c = &ref_arg(config, "config")?.0;
        let clips = generate_stream(&c.stream_spec())?;
        let run = run_stream(&m.bundle, &m.schedule, clips, &c.stream, &mut c.rng())?;
        *out = Box::into_raw(Box::new(NaRun(run)));
        Ok(())
    })
}

/// # Safety
/// `run` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn na_run_summary(run: *const NaRun, out: *mut NaSummary) -> NaStatus {
    guard(|| {
        let s = &ref_arg(run, "run")?.0.summary;
        *out_arg(out, "out")? = NaSummary {
            steps: s.steps,
            adapt_count: s.adapt_count,
            mean_ssim: s.mean_ssim,
            mean_psnr: s.mean_psnr,
            mean_boundary: s.mean_boundary,
            mean_loss_total: s.mean_loss_total,
            frechet: s.frechet,
            mean_predict_secs: s.mean_predict_secs,
            mean_adapt_secs: s.mean_adapt_secs,
        };
        Ok(())
    })
}

/// Metrics of step `index` (0-based).
///
/// # Safety
/// `run` must come from this library and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn na_run_step(run: *const NaRun, index: usize, out: *mut NaStep) -> NaStatus {
    guard(|| {
        let records = &ref_arg(run, "run")?.0.records;
        let r = records
            .get(index)
            .ok_or_else(|| Fail(NaStatus::InvalidArgument, format!("step index {index} >= {}", records.len())))?;
        *out_arg(out, "out")? = NaStep {
            step: r.step,
            ssim: r.ssim,
            psnr: r.psnr,
            boundary: r.boundary,
            loss_pixel: r.loss.pixel,
            loss_feature: r.loss.feature,
            loss_latent: r.loss.latent.unwrap_or(f64::NAN),
            loss_total: r.loss.total,
            adapted: r.adapted,
            prediction_hash: r.prediction_hash,
        };
        Ok(())
    })
}

/// Write the per-step CSV.
///
/// # Safety
/// `run` must come from this library and `path` be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn na_run_write_csv(run: *const NaRun, path: *const c_char) -> NaStatus {
    guard(|| {
        let r = ref_arg(run, "run")?;
        write_csv(&r.0.records, &PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `run` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn na_run_free(run: *mut NaRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

// ------------------------------------------------------------------ sessions

/// Losses of one observed prediction. `latent` is NaN outside latent mode.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NaLoss {
    pub pixel: f64,
    pub feature: f64,
    pub latent: f64,
    pub total: f64,
    pub adapted: bool,
}

impl NaLoss {
    fn from_breakdown(l: LossBreakdown, adapted: bool) -> Self {
        NaLoss { pixel: l.pixel, feature: l.feature, latent: l.latent.unwrap_or(f64::NAN), total: l.total, adapted }
    }
}

/// Step-by-step predictor for callers that own the stream (opaque).
///
/// Alternate [`na_session_predict`] and [`na_session_observe`]. Supports the
/// `frozen` and `savi_dno_*` variants.
pub struct NaSession {
    adapter: Adapter,
    config: RunConfig,
    state: NoiseState,
    z_cond: Tensor,
    pending: Option<(PendingPrediction, bool, usize)>,
    rng: ChaCha8Rng,
    step: usize,
}

fn clip_from(models: &ModelBundle, data: *const f64, len: usize) -> Result<VideoClip, Fail> {
    let dims = models.config().clip.dims();
    let want: usize = dims.iter().product();
    if data.is_null() {
        return Err(null("pixels"));
    }
    if len != want {
        return Err(Fail(NaStatus::Shape, format!("clip needs {want} values, got {len}")));
    }
    // SAFETY: the caller guarantees `len` readable values.
    let values = unsafe { std::slice::from_raw_parts(data, len) }.to_vec();
    Ok(VideoClip::new(Tensor::new(dims.to_vec(), values)?)?)
}

/// Start a session conditioned on the first observed clip of `len` values.
///
/// # Safety
/// `models`/`config` must come from this library, `first` must point to `len`
/// values and `out` must be valid. The session keeps its own copy of the models.
#[no_mangle]
pub unsafe extern "C" fn na_session_new(
    models: *const NaModels,
    config: *const NaConfig,
    first: *const f64,
    len: usize,
    out: *mut *mut NaSession,
) -> NaStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = ref_arg(models, "models")?;
        let config = ref_arg(config, "config")?.0.clone();
        let variant = config.stream.variant;
        let mut optim = config.stream.optim;
        let mode = match variant {
            Variant::Frozen => {
                optim.p = 0.0;
                LossMode::PixelFeature
            }
            Variant::SaviPixel => LossMode::Pixel,
            Variant::SaviPixelFeature => LossMode::PixelFeature,
            Variant::SaviLatent => LossMode::Latent,
            other => return Err(Fail(NaStatus::InvalidConfig, format!("sessions do not support variant {other}"))),
        };
        let adapter = Adapter::new(m.bundle.clone(), m.schedule.clone(), config.stream.sampler, optim, mode)?;
        let first = clip_from(&m.bundle, first, len)?;
        let z_cond = m.bundle.autoencoder.encode(&first)?;
        let mut rng = config.rng();
        let state = NoiseState::sample(&m.bundle.config().latent_dims(), &mut rng);
        *out = Box::into_raw(Box::new(NaSession { adapter, config, state, z_cond, pending: None, rng, step: 1 }));
        Ok(())
    })
}

/// Predict the next clip into `out` (`len` values). A previous unobserved
/// prediction is discarded.
///
/// # Safety
/// `session` must come from this library and `out` point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn na_session_predict(session: *mut NaSession, out: *mut f64, len: usize) -> NaStatus {
    guard(|| {
        let s = out_arg(session, "session")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let want = s.adapter.bundle.config().clip.numel();
        if len != want {
            return Err(Fail(NaStatus::Shape, format!("clip needs {want} values, got {len}")));
        }
        let sc = &s.config.stream;
        let (optimize, repeats) = if sc.variant.is_savi() {
            should_optimize(s.step, sc.every_k, sc.warmup_steps, sc.warmup_repeats)?
        } else {
            (false, 1)
        };
        let pending = s.adapter.predict(&s.z_cond, &s.state, optimize, &mut s.rng)?;
        ptr::copy_nonoverlapping(pending.x_pred.pixels().data().as_ptr(), out, len);
        s.pending = Some((pending, optimize, repeats));
        Ok(())
    })
}

/// Report the observed clip. Scores (and, when scheduled, adapts on) the
/// pending prediction, then conditions the next prediction on this clip.
/// Without a pending prediction only the conditioning is updated and `loss`
/// is left untouched.
///
/// # Safety
/// `session` must come from this library, `pixels` must point to `len` values
/// and `loss` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn na_session_observe(session: *mut NaSession, pixels: *const f64, len: usize, loss: *mut NaLoss) -> NaStatus {
    guard(|| {
        let s = out_arg(session, "session")?;
        let obs = clip_from(&s.adapter.bundle, pixels, len)?;
        let z_obs = s.adapter.bundle.autoencoder.encode(&obs)?;
        if let Some((pending, optimize, repeats)) = s.pending.take() {
            let breakdown = if optimize {
                s.adapter.adapt(pending, &s.z_cond, &obs, Some(&z_obs), &mut s.state, repeats)?
            } else {
                s.adapter.score(&pending, &obs, Some(&z_obs))?
            };
            if let Some(l) = loss.as_mut() {
                *l = NaLoss::from_breakdown(breakdown, optimize);
            }
            s.step += 1;
        }
        s.z_cond = z_obs;
        Ok(())
    })
}

/// # Safety
/// `session` must be NULL or come from this library, and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn na_session_free(session: *mut NaSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}
