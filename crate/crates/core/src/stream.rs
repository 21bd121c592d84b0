//! The streaming protocol: predict the next clip, observe it, score, adapt.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;

use crate::data::{format_sig9, VideoClip};
use crate::diffcore::Tensor;
use crate::diffusion::{ddim_invert, sample, FineTuner, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::metrics::{boundary_consistency, frechet_distance, gaussian_fit, psnr, ssim};
use crate::models::{checksum, AutoencoderParams, ModelBundle};
use crate::noiseopt::{Adapter, LossBreakdown, LossMode, NoiseState, OptimConfig};

/// `every_k` value meaning "never after warmup".
pub const NEVER: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Frozen,
    SaviPixel,
    SaviPixelFeature,
    SaviLatent,
    DdimInverse,
    Finetune(usize),
}

impl Variant {
    pub fn is_savi(self) -> bool {
        matches!(self, Variant::SaviPixel | Variant::SaviPixelFeature | Variant::SaviLatent)
    }

    fn loss_mode(self) -> LossMode {
        match self {
            Variant::SaviPixel => LossMode::Pixel,
            Variant::SaviLatent => LossMode::Latent,
            _ => LossMode::PixelFeature,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Frozen => f.write_str("frozen"),
            Variant::SaviPixel => f.write_str("savi_dno_pixel"),
            Variant::SaviPixelFeature => f.write_str("savi_dno_pixel_feature"),
            Variant::SaviLatent => f.write_str("savi_dno_latent"),
            Variant::DdimInverse => f.write_str("ddim_inverse"),
            Variant::Finetune(n) => write!(f, "finetune({n})"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "frozen" => Variant::Frozen,
            "savi_dno_pixel" => Variant::SaviPixel,
            "savi_dno_pixel_feature" => Variant::SaviPixelFeature,
            "savi_dno_latent" => Variant::SaviLatent,
            "ddim_inverse" => Variant::DdimInverse,
            _ => {
                let n = s
                    .strip_prefix("finetune(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}'")))?;
                if n == 0 {
                    return Err(Error::InvalidConfig("finetune needs at least one inner step".into()));
                }
                Variant::Finetune(n)
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamConfig {
    pub variant: Variant,
    pub every_k: usize,
    pub warmup_steps: usize,
    /// Inner optimisation repeats on each warmup step.
    pub warmup_repeats: usize,
    pub optim: OptimConfig,
    pub sampler: SamplerConfig,
    pub finetune_lr: f64,
    pub record_noise: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            variant: Variant::SaviPixelFeature,
            every_k: 1,
            warmup_steps: 0,
            warmup_repeats: 1,
            optim: OptimConfig::default(),
            sampler: SamplerConfig::default(),
            finetune_lr: 1e-4,
            record_noise: false,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.every_k == 0 {
            return Err(Error::InvalidConfig("every_k must be at least 1".into()));
        }
        if self.warmup_steps > 0 && self.warmup_repeats == 0 {
            return Err(Error::InvalidConfig("warmup_repeats must be at least 1".into()));
        }
        if !(self.finetune_lr > 0.0) {
            return Err(Error::InvalidConfig("finetune_lr must be positive".into()));
        }
        if self.variant.is_savi() {
            self.optim.validate()?;
            if self.sampler.eta != 0.0 {
                return Err(Error::InvalidConfig("noise optimisation needs eta = 0".into()));
            }
        }
        if self.variant == Variant::DdimInverse && self.sampler.eta != 0.0 {
            return Err(Error::EtaNonZero(self.sampler.eta));
        }
        Ok(())
    }
}

/// Whether step `s` (1-based) adapts, and with how many inner repeats.
pub fn should_optimize(s: usize, every_k: usize, warmup_steps: usize, warmup_repeats: usize) -> Result<(bool, usize)> {
    if s == 0 {
        return Err(Error::Precondition("steps are counted from 1".into()));
    }
    if every_k == 0 {
        return Err(Error::InvalidConfig("every_k must be at least 1".into()));
    }
    if s <= warmup_steps {
        return Ok((true, warmup_repeats.max(1)));
    }
    Ok((s.is_multiple_of(every_k), 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub loss: LossBreakdown,
    pub boundary: f64,
    pub predict_secs: f64,
    pub adapt_secs: f64,
    pub adapted: bool,
    /// Hash of the predicted pixels.
    pub prediction_hash: u64,
    /// Noise carried into the next step, when recording is on.
    pub noise: Option<Vec<f64>>,
}

/// Run-level aggregates.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub steps: usize,
    pub adapt_count: usize,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
    pub mean_boundary: f64,
    pub mean_loss_total: f64,
    pub frechet: f64,
    pub ssim_first_100: f64,
    pub ssim_last_100: f64,
    pub mean_predict_secs: f64,
    pub mean_adapt_secs: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl Summary {
    pub fn from_records(records: &[StepRecord], frechet: f64) -> Self {
        let head = records.len().min(100);
        let tail = records.len().saturating_sub(100);
        Summary {
            steps: records.len(),
            adapt_count: records.iter().filter(|r| r.adapted).count(),
            mean_ssim: mean(records.iter().map(|r| r.ssim)),
            mean_psnr: mean(records.iter().map(|r| r.psnr)),
            mean_boundary: mean(records.iter().map(|r| r.boundary)),
            mean_loss_total: mean(records.iter().map(|r| r.loss.total)),
            frechet,
            ssim_first_100: mean(records[..head].iter().map(|r| r.ssim)),
            ssim_last_100: mean(records[tail..].iter().map(|r| r.ssim)),
            mean_predict_secs: mean(records.iter().map(|r| r.predict_secs)),
            mean_adapt_secs: mean(records.iter().map(|r| r.adapt_secs)),
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = format_sig9;
        vec![
            ("steps", self.steps.to_string()),
            ("adapt_count", self.adapt_count.to_string()),
            ("mean_ssim", f(self.mean_ssim)),
            ("mean_psnr", f(self.mean_psnr)),
            ("mean_boundary", f(self.mean_boundary)),
            ("mean_loss_total", f(self.mean_loss_total)),
            ("frechet", f(self.frechet)),
            ("ssim_first_100", f(self.ssim_first_100)),
            ("ssim_last_100", f(self.ssim_last_100)),
            ("mean_predict_secs", f(self.mean_predict_secs)),
            ("mean_adapt_secs", f(self.mean_adapt_secs)),
        ]
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[derive(Clone, Debug)]
pub struct StreamRun {
    pub records: Vec<StepRecord>,
    pub summary: Summary,
    /// Feature vectors of every prediction and of its target, in step order.
    pub pred_features: Vec<Vec<f64>>,
    pub obs_features: Vec<Vec<f64>>,
}

impl StreamRun {
    /// Recorded noise trajectory as `[steps, d_z]`, if recording was on.
    pub fn noise_trajectory(&self) -> Option<Tensor> {
        let rows: Vec<&Vec<f64>> = self.records.iter().map(|r| r.noise.as_ref()).collect::<Option<_>>()?;
        let d = rows.first().map_or(0, |r| r.len());
        Tensor::new(vec![rows.len(), d], rows.into_iter().flatten().copied().collect()).ok()
    }
}

/// Harness events, in the order they happen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamEvent {
    /// Prediction for `step` is final; the target has not been read yet.
    Predicted { step: usize, hash: u64 },
    /// The target of `step` was scored.
    Scored { step: usize },
}

pub fn run_stream<I, R>(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    clips: I,
    config: &StreamConfig,
    rng: &mut R,
) -> Result<StreamRun>
where
    I: IntoIterator<Item = VideoClip>,
    R: Rng + ?Sized,
{
    run_stream_observed(bundle, schedule, clips, config, rng, &mut |_| {})
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// [`run_stream`] with a callback receiving harness events.
pub fn run_stream_observed<I, R>(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    clips: I,
    config: &StreamConfig,
    rng: &mut R,
    observer: &mut dyn FnMut(StreamEvent),
) -> Result<StreamRun>
where
    I: IntoIterator<Item = VideoClip>,
    R: Rng + ?Sized,
{
    config.validate()?;
    let variant = config.variant;
    let mut optim = config.optim;
    match variant {
        Variant::Frozen | Variant::Finetune(_) => optim.p = 0.0,
        Variant::DdimInverse => optim.p = 1.0,
        _ => {}
    }
    let mut adapter = Adapter::new(bundle.clone(), schedule.clone(), config.sampler, optim, variant.loss_mode())?;
    let mut tuner = match variant {
        Variant::Finetune(_) => Some(FineTuner::new((*bundle.denoiser).clone(), config.finetune_lr)),
        _ => None,
    };
    let latent_dims = bundle.config().latent_dims();

    let mut source = clips.into_iter();
    let mut x_cond = source.next().ok_or(Error::StreamTooShort(0))?;
    let mut z_cond = bundle.autoencoder.encode(&x_cond)?;
    let mut state = NoiseState::sample(&latent_dims, rng);
    let mut records = Vec::new();
    let mut pred_features = Vec::new();
    let mut obs_features = Vec::new();

    let mut s = 1;
    loop {
        let (optimize, repeats) = if variant.is_savi() {
            should_optimize(s, config.every_k, config.warmup_steps, config.warmup_repeats)?
        } else {
            (!matches!(variant, Variant::Frozen), 1)
        };

        let t0 = Instant::now();
        let pending = adapter.predict(&z_cond, &state, optimize && variant.is_savi(), rng)?;
        let predict_secs = elapsed(t0);
        let x_pred = pending.x_pred.clone();
        let hash = checksum([x_pred.pixels()]);
        observer(StreamEvent::Predicted { step: s, hash });

        let Some(x_obs) = source.next() else { break };
        let z_obs = bundle.autoencoder.encode(&x_obs)?;

        let t1 = Instant::now();
        let loss = if variant.is_savi() && optimize {
            adapter.adapt(pending, &z_cond, &x_obs, Some(&z_obs), &mut state, repeats)?
        } else {
            let loss = adapter.score(&pending, &x_obs, Some(&z_obs))?;
            match variant {
                Variant::DdimInverse => {
                    state.eps = ddim_invert(bundle.denoiser.as_ref(), schedule, &config.sampler, &z_cond, &z_obs)?;
                }
                Variant::Finetune(n) => {
                    let tuner = tuner.as_mut().expect("finetune state");
                    tuner.step(schedule, &z_obs, &z_cond, n, rng)?;
                    adapter.bundle.denoiser = Arc::new(tuner.params.clone());
                }
                _ => {}
            }
            loss
        };
        let adapt_secs = if optimize { elapsed(t1) } else { 0.0 };

        records.push(StepRecord {
            step: s,
            ssim: ssim(&x_obs, &x_pred)?,
            psnr: psnr(&x_obs, &x_pred, 1.0)?,
            loss,
            boundary: boundary_consistency(&x_cond, &x_pred)?,
            predict_secs,
            adapt_secs,
            adapted: optimize,
            prediction_hash: hash,
            noise: config.record_noise.then(|| state.eps.data().to_vec()),
        });
        pred_features.push(bundle.features.features(&x_pred)?);
        obs_features.push(bundle.features.features(&x_obs)?);
        observer(StreamEvent::Scored { step: s });

        x_cond = x_obs;
        z_cond = z_obs;
        s += 1;
    }
    if records.is_empty() {
        return Err(Error::StreamTooShort(1));
    }
    let frechet = if records.len() >= 2 {
        frechet_distance(&gaussian_fit(&pred_features)?, &gaussian_fit(&obs_features)?)?
    } else {
        f64::NAN
    };
    let summary = Summary::from_records(&records, frechet);
    Ok(StreamRun { records, summary, pred_features, obs_features })
}

/// Best of `k` fresh-noise predictions, selected by SSIM against the target.
#[derive(Clone, Debug)]
pub struct OracleResult {
    pub best: VideoClip,
    pub best_index: usize,
    /// SSIM of every sample, in draw order.
    pub ssims: Vec<f64>,
}

impl OracleResult {
    pub fn best_ssim(&self) -> f64 {
        self.ssims[self.best_index]
    }
}

pub fn oracle_best_of_k<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    z_cond: &Tensor,
    x_target: &VideoClip,
    k: usize,
    rng: &mut R,
) -> Result<OracleResult> {
    if k == 0 {
        return Err(Error::Precondition("best-of-k needs k >= 1".into()));
    }
    let dims = bundle.config().latent_dims();
    let mut best: Option<(usize, VideoClip)> = None;
    let mut ssims = Vec::with_capacity(k);
    for i in 0..k {
        let eps = Tensor::randn(&dims, rng);
        let z = sample(&bundle.denoiser, schedule, sampler, z_cond, &eps, rng)?;
        let x = bundle.autoencoder.decode(&z)?;
        let v = ssim(x_target, &x)?;
        if best.as_ref().is_none_or(|(j, _)| v > ssims[*j]) {
            best = Some((i, x));
        }
        ssims.push(v);
    }
    let (best_index, best) = best.expect("k >= 1");
    Ok(OracleResult { best, best_index, ssims })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleStep {
    pub step: usize,
    pub single_ssim: f64,
    pub best_ssim: f64,
    pub best_psnr: f64,
}

/// Best-of-`k` over a stream, conditioning each step on the observed previous clip.
pub fn run_oracle<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    clips: &[VideoClip],
    k: usize,
    rng: &mut R,
) -> Result<Vec<OracleStep>> {
    if clips.len() < 2 {
        return Err(Error::StreamTooShort(clips.len()));
    }
    let mut out = Vec::with_capacity(clips.len() - 1);
    let mut z_cond = bundle.autoencoder.encode(&clips[0])?;
    for (s, pair) in clips.windows(2).enumerate() {
        let target = &pair[1];
        let r = oracle_best_of_k(bundle, schedule, sampler, &z_cond, target, k, rng)?;
        out.push(OracleStep {
            step: s + 1,
            single_ssim: r.ssims[0],
            best_ssim: r.best_ssim(),
            best_psnr: psnr(target, &r.best, 1.0)?,
        });
        z_cond = bundle.autoencoder.encode(target)?;
    }
    Ok(out)
}

/// Pixel round trip through some autoencoder.
pub trait Reconstruct {
    fn reconstruct(&self, x: &VideoClip) -> Result<VideoClip>;
}

impl Reconstruct for AutoencoderParams {
    fn reconstruct(&self, x: &VideoClip) -> Result<VideoClip> {
        self.decode(&self.encode(x)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpperBound {
    pub ssim: Vec<f64>,
    pub psnr: Vec<f64>,
    pub mean_ssim: f64,
    pub mean_psnr: f64,
}

/// Metrics of `decode(encode(x))` against `x` for every prediction target (clips after the first).
pub fn autoencoder_upper_bound<A: Reconstruct + ?Sized>(ae: &A, clips: &[VideoClip]) -> Result<UpperBound> {
    if clips.len() < 2 {
        return Err(Error::StreamTooShort(clips.len()));
    }
    let mut ssims = Vec::with_capacity(clips.len() - 1);
    let mut psnrs = Vec::with_capacity(clips.len() - 1);
    for x in &clips[1..] {
        let r = ae.reconstruct(x)?;
        ssims.push(ssim(x, &r)?);
        psnrs.push(psnr(x, &r, 1.0)?);
    }
    Ok(UpperBound {
        mean_ssim: mean(ssims.iter().copied()),
        mean_psnr: mean(psnrs.iter().copied()),
        ssim: ssims,
        psnr: psnrs,
    })
}
