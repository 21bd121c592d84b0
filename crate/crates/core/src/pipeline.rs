//! End-to-end model preparation: data generation, training, and parameter files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::data::{generate_stream, read_tensors, write_tensors, DriftEvent, StreamSpec, VideoClip};
use crate::diffcore::Tensor;
use crate::diffusion::{build_schedule, train_denoiser, DenoiserTrainConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::models::{
    checksum, train_autoencoder, AeTrainConfig, AutoencoderParams, DenoiserParams, FeatureNetParams, ModelBundle,
    ModelConfig, TrainReport,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub beta_start: f64,
    pub beta_end: f64,
    pub autoencoder: AeTrainConfig,
    pub denoiser: DenoiserTrainConfig,
    /// Template for training streams; drift is removed and the seed replaced per stream.
    pub stream: StreamSpec,
    pub train_streams: usize,
    pub clips_per_stream: usize,
    pub feature_seed: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
            autoencoder: AeTrainConfig::default(),
            denoiser: DenoiserTrainConfig::default(),
            stream: StreamSpec::default(),
            train_streams: 8,
            clips_per_stream: 48,
            feature_seed: 7,
            seed: 1,
        }
    }
}

/// Trained networks plus their schedule and training curves.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub bundle: ModelBundle,
    pub schedule: NoiseSchedule,
    pub autoencoder_report: TrainReport,
    pub denoiser_report: TrainReport,
}

/// Training streams: `train_streams` drift-free streams from the template's
/// initial regime. The autoencoder additionally sees the same number of
/// streams that start in each drifted regime, so reconstruction quality does
/// not depend on the regime while the denoiser only knows the initial one.
pub fn training_streams(config: &TrainConfig) -> Result<(Vec<Vec<VideoClip>>, Vec<Vec<VideoClip>>)> {
    let base = StreamSpec { length: config.clips_per_stream, drift: vec![], ..config.stream.clone() };
    let mut initial = Vec::new();
    let mut drifted = Vec::new();
    for i in 0..config.train_streams as u64 {
        let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(1000 + i);
        initial.push(generate_stream(&StreamSpec { seed, ..base.clone() })?);
        let mut events: Vec<DriftEvent> = Vec::new();
        for e in &config.stream.drift {
            // Regime k is reached by applying the first k deltas on consecutive opening clips.
            events.push(DriftEvent { at_clip: events.len(), delta: e.delta });
            let spec = StreamSpec { seed: seed ^ 0xd81f7, drift: events.clone(), ..base.clone() };
            drifted.push(generate_stream(&spec)?);
        }
    }
    Ok((initial, drifted))
}

fn latent_pairs(ae: &AutoencoderParams, streams: &[Vec<VideoClip>]) -> Result<Vec<(Tensor, Tensor)>> {
    let mut pairs = Vec::new();
    for s in streams {
        let z: Vec<Tensor> = s.iter().map(|c| ae.encode(c)).collect::<Result<_>>()?;
        pairs.extend(z.windows(2).map(|w| (w[0].clone(), w[1].clone())));
    }
    Ok(pairs)
}

pub fn train_models(config: &TrainConfig) -> Result<TrainedModels> {
    config.model.validate()?;
    let schedule = build_schedule(config.model.timesteps, config.beta_start, config.beta_end)?;
    let (initial, drifted) = training_streams(config)?;
    let ae_clips: Vec<VideoClip> = initial.iter().chain(&drifted).flatten().cloned().collect();
    let ae_train = AeTrainConfig { seed: config.seed, ..config.autoencoder };
    let (ae, autoencoder_report) = train_autoencoder(&ae_clips, config.model, &ae_train)?;
    let pairs = latent_pairs(&ae, &initial)?;
    let d_train = DenoiserTrainConfig { seed: config.seed.wrapping_add(17), ..config.denoiser };
    let (denoiser, denoiser_report) = train_denoiser(&pairs, config.model, &schedule, &d_train)?;
    let features = FeatureNetParams::init(config.model, config.feature_seed)?;
    Ok(TrainedModels {
        bundle: ModelBundle { autoencoder: Arc::new(ae), denoiser: Arc::new(denoiser), features: Arc::new(features) },
        schedule,
        autoencoder_report,
        denoiser_report,
    })
}

pub const AUTOENCODER_FILE: &str = "autoencoder.nft";
pub const DENOISER_FILE: &str = "denoiser.nft";
pub const FEATURES_FILE: &str = "features.nft";
pub const SCHEDULE_FILE: &str = "schedule.nft";

/// Write the four parameter files into `dir`, creating it if needed.
pub fn save_models(dir: &Path, models: &TrainedModels, feature_seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let b = &models.bundle;
    let mut feat = vec![Tensor::from_vec(vec![feature_seed as f64])];
    feat.extend(b.features.tensors().into_iter().cloned());
    let sched = vec![Tensor::from_vec(models.schedule.beta().to_vec())];
    let files = [
        (AUTOENCODER_FILE, b.autoencoder.to_tensors()),
        (DENOISER_FILE, b.denoiser.to_tensors()),
        (FEATURES_FILE, feat),
        (SCHEDULE_FILE, sched),
    ];
    let mut out = Vec::new();
    for (name, tensors) in files {
        let path = dir.join(name);
        write_tensors(&path, &tensors)?;
        out.push(path);
    }
    Ok(out)
}

/// Load a bundle written by [`save_models`]. The feature network is rebuilt
/// from its seed and must match the stored weights bit for bit.
pub fn load_models(dir: &Path, model: ModelConfig) -> Result<(ModelBundle, NoiseSchedule)> {
    let ae = AutoencoderParams::from_tensors(read_tensors(&dir.join(AUTOENCODER_FILE))?, model)?;
    let den = DenoiserParams::from_tensors(read_tensors(&dir.join(DENOISER_FILE))?, model)?;
    let feat_tensors = read_tensors(&dir.join(FEATURES_FILE))?;
    let seed = feat_tensors
        .first()
        .and_then(|t| t.data().first().copied())
        .ok_or_else(|| Error::InvalidConfig("features file has no seed".into()))?;
    let features = FeatureNetParams::init(model, seed as u64)?;
    if checksum(feat_tensors[1..].iter()) != checksum(features.tensors()) {
        return Err(Error::InvalidConfig("feature network weights do not match their seed".into()));
    }
    let betas = read_tensors(&dir.join(SCHEDULE_FILE))?;
    let betas = betas.first().ok_or_else(|| Error::InvalidConfig("empty schedule file".into()))?;
    let schedule = schedule_from_betas(betas.data())?;
    if schedule.steps() != model.timesteps {
        return Err(Error::InvalidConfig(format!("schedule has T={} but model expects {}", schedule.steps(), model.timesteps)));
    }
    let bundle = ModelBundle { autoencoder: Arc::new(ae), denoiser: Arc::new(den), features: Arc::new(features) };
    Ok((bundle, schedule))
}

fn schedule_from_betas(betas: &[f64]) -> Result<NoiseSchedule> {
    let (&first, &last) = betas.first().zip(betas.last()).ok_or_else(|| Error::InvalidRange("empty schedule".into()))?;
    let s = build_schedule(betas.len(), first, last)?;
    if s.beta().iter().zip(betas).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::InvalidConfig("stored betas are not a linear schedule".into()));
    }
    Ok(s)
}
