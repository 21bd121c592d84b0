//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. `RunConfig::default().to_text()` is the documented default
//! configuration; the resolved config of every run is written next to its
//! outputs in the same format, so a run can be repeated from that file alone.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `model_dir` | `models` | parameter files written by `train`, read by the other commands |
//! | `out` | `out` | output directory |
//! | `seed` | `0` | stream data seed; sampling noise uses a salted copy |
//! | `timesteps`, `beta_start`, `beta_end` | `100`, `0.001`, `0.1` | linear noise schedule |
//! | `steps`, `eta` | `10`, `0` | DDIM sampler |
//! | `variant` | `savi_dno_pixel_feature` | `frozen`, `savi_dno_pixel`, `savi_dno_pixel_feature`, `savi_dno_latent`, `ddim_inverse`, `finetune(n)` |
//! | `every_k` | `1` | adapt every k-th step after warmup; `never` disables |
//! | `warmup_steps`, `warmup_repeats` | `0`, `1` | leading steps adapted with repeated inner updates |
//! | `lr`, `lambda`, `p` | `0.01`, `0.002`, `0.9` | noise step size, feature-loss weight, interpolation weight |
//! | `adam_beta1`, `adam_beta2`, `adam_eps` | `0.9`, `0.999`, `1e-8` | noise optimizer moments |
//! | `clip_norm` | `10` | gradient norm cap; `none` disables |
//! | `finetune_lr` | `0.0001` | learning rate of the weight fine-tuning baseline |
//! | `record_noise` | `false` | store the noise after every step |
//! | `stream_kind`, `stream_length`, `drift_at` | `bouncing-sprites`, `300`, `150` | evaluation stream; `drift_at = none` removes the drift |
//! | `oracle_k`, `sweep_seeds` | `10`, `3` | best-of-k size; seeds per ablation value |
//! | `train_streams`, `clips_per_stream` | `8`, `48` | training data |
//! | `ae_epochs`, `ae_lr`, `ae_batch` | `12`, `0.003`, `8` | autoencoder training |
//! | `denoiser_iterations`, `denoiser_lr`, `denoiser_batch`, `cond_dropout` | `12000`, `0.002`, `16`, `0.3` | denoiser training |
//! | `feature_seed`, `train_seed` | `7`, `1` | feature network and training seeds |

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{format_sig9, StreamSpec};
use crate::diffusion::{build_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use crate::stream::{StreamConfig, NEVER};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model_dir: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub train: TrainConfig,
    pub stream: StreamConfig,
    pub spec: StreamSpec,
    pub oracle_k: usize,
    pub sweep_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_dir: PathBuf::from("models"),
            out: PathBuf::from("out"),
            seed: 0,
            train: TrainConfig::default(),
            stream: StreamConfig::default(),
            spec: StreamSpec::default(),
            oracle_k: 10,
            sweep_seeds: 3,
        }
    }
}

/// Salt separating the sampling-noise stream from the data stream of the same seed.
const RNG_SALT: u64 = 0x5a71_0000_0000_0001;

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::InvalidConfig(format!("{key} = {value}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key} = {value}: expected true or false"))),
    }
}

impl RunConfig {
    /// Parse `text` on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::InvalidConfig(format!("line {}: duplicate key {key}", n + 1)));
            }
            c.set(key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Set one key. Unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.stream;
        match key {
            "model_dir" => self.model_dir = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "timesteps" => t.model.timesteps = parse(key, v)?,
            "beta_start" => t.beta_start = parse(key, v)?,
            "beta_end" => t.beta_end = parse(key, v)?,
            "steps" => s.sampler.num_steps = parse(key, v)?,
            "eta" => s.sampler.eta = parse(key, v)?,
            "variant" => s.variant = v.parse()?,
            "every_k" => s.every_k = if v == "never" { NEVER } else { parse(key, v)? },
            "warmup_steps" => s.warmup_steps = parse(key, v)?,
            "warmup_repeats" => s.warmup_repeats = parse(key, v)?,
            "lr" => s.optim.lr = parse(key, v)?,
            "lambda" => s.optim.lambda = parse(key, v)?,
            "p" => s.optim.p = parse(key, v)?,
            "adam_beta1" => s.optim.adam_beta1 = parse(key, v)?,
            "adam_beta2" => s.optim.adam_beta2 = parse(key, v)?,
            "adam_eps" => s.optim.adam_eps = parse(key, v)?,
            "clip_norm" => s.optim.clip_norm = if v == "none" { None } else { Some(parse(key, v)?) },
            "finetune_lr" => s.finetune_lr = parse(key, v)?,
            "record_noise" => s.record_noise = parse_bool(key, v)?,
            "stream_kind" => self.spec.kind = v.parse()?,
            "stream_length" => self.spec.length = parse(key, v)?,
            "drift_at" => {
                if v == "none" {
                    self.spec.drift.clear();
                } else {
                    let at = parse(key, v)?;
                    let delta = self.spec.drift.first().map(|e| e.delta).unwrap_or(StreamSpec::default().drift[0].delta);
                    self.spec.drift = vec![crate::data::DriftEvent { at_clip: at, delta }];
                }
            }
            "oracle_k" => self.oracle_k = parse(key, v)?,
            "sweep_seeds" => self.sweep_seeds = parse(key, v)?,
            "train_streams" => t.train_streams = parse(key, v)?,
            "clips_per_stream" => t.clips_per_stream = parse(key, v)?,
            "ae_epochs" => t.autoencoder.epochs = parse(key, v)?,
            "ae_lr" => t.autoencoder.lr = parse(key, v)?,
            "ae_batch" => t.autoencoder.batch = parse(key, v)?,
            "denoiser_iterations" => t.denoiser.iterations = parse(key, v)?,
            "denoiser_lr" => t.denoiser.lr = parse(key, v)?,
            "denoiser_batch" => t.denoiser.batch = parse(key, v)?,
            "cond_dropout" => t.denoiser.cond_dropout = parse(key, v)?,
            "feature_seed" => t.feature_seed = parse(key, v)?,
            "train_seed" => t.seed = parse(key, v)?,
            _ => return Err(Error::InvalidConfig(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.model.validate()?;
        build_schedule(self.train.model.timesteps, self.train.beta_start, self.train.beta_end)?;
        self.stream.validate()?;
        self.stream.sampler.timesteps(self.train.model.timesteps)?;
        self.stream_spec().validate()?;
        if self.oracle_k == 0 || self.sweep_seeds == 0 {
            return Err(Error::InvalidConfig("oracle_k and sweep_seeds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.denoiser.cond_dropout) {
            return Err(Error::InvalidConfig("cond_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Evaluation stream for this config's seed.
    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec { seed: self.seed, clip: self.train.model.clip, ..self.spec.clone() }
    }

    /// Sampling-noise generator for this config's seed.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ RNG_SALT)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.train.model.timesteps, self.train.beta_start, self.train.beta_end)
    }

    /// Every key with its resolved value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = |v: f64| format_sig9(v);
        let t = &self.train;
        let s = &self.stream;
        vec![
            ("model_dir", self.model_dir.display().to_string()),
            ("out", self.out.display().to_string()),
            ("seed", self.seed.to_string()),
            ("timesteps", t.model.timesteps.to_string()),
            ("beta_start", f(t.beta_start)),
            ("beta_end", f(t.beta_end)),
            ("steps", s.sampler.num_steps.to_string()),
            ("eta", f(s.sampler.eta)),
            ("variant", s.variant.to_string()),
            ("every_k", if s.every_k == NEVER { "never".into() } else { s.every_k.to_string() }),
            ("warmup_steps", s.warmup_steps.to_string()),
            ("warmup_repeats", s.warmup_repeats.to_string()),
            ("lr", f(s.optim.lr)),
            ("lambda", f(s.optim.lambda)),
            ("p", f(s.optim.p)),
            ("adam_beta1", f(s.optim.adam_beta1)),
            ("adam_beta2", f(s.optim.adam_beta2)),
            ("adam_eps", f(s.optim.adam_eps)),
            ("clip_norm", s.optim.clip_norm.map_or("none".into(), f)),
            ("finetune_lr", f(s.finetune_lr)),
            ("record_noise", s.record_noise.to_string()),
            ("stream_kind", self.spec.kind.to_string()),
            ("stream_length", self.spec.length.to_string()),
            ("drift_at", self.spec.drift.first().map_or("none".into(), |e| e.at_clip.to_string())),
            ("oracle_k", self.oracle_k.to_string()),
            ("sweep_seeds", self.sweep_seeds.to_string()),
            ("train_streams", t.train_streams.to_string()),
            ("clips_per_stream", t.clips_per_stream.to_string()),
            ("ae_epochs", t.autoencoder.epochs.to_string()),
            ("ae_lr", f(t.autoencoder.lr)),
            ("ae_batch", t.autoencoder.batch.to_string()),
            ("denoiser_iterations", t.denoiser.iterations.to_string()),
            ("denoiser_lr", f(t.denoiser.lr)),
            ("denoiser_batch", t.denoiser.batch.to_string()),
            ("cond_dropout", f(t.denoiser.cond_dropout)),
            ("feature_seed", t.feature_seed.to_string()),
            ("train_seed", t.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::Variant;

    #[test]
    fn defaults_round_trip() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
        assert_eq!(RunConfig::parse("").unwrap(), d);
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("# comment\nvariant = finetune(5)\n\nevery_k = never\nclip_norm = none\ndrift_at = none\np=0.5\n")
            .unwrap();
        assert_eq!(c.stream.variant, Variant::Finetune(5));
        assert_eq!(c.stream.every_k, NEVER);
        assert_eq!(c.stream.optim.clip_norm, None);
        assert!(c.spec.drift.is_empty());
        assert_eq!(c.stream.optim.p, 0.5);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        for text in ["bogus = 1", "p = 2", "steps = ten", "seed", "seed = 1\nseed = 2", "eta = 0.5\nvariant = ddim_inverse"] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
