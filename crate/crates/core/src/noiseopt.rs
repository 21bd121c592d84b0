//! Observation losses, variance-preserving noise interpolation and the
//! per-observation Adam step on the sampling noise.

use std::str::FromStr;

use rand::Rng;

use crate::data::VideoClip;
use crate::diffcore::{Tape, Tensor, Var};
use crate::diffusion::{sample_on_tape, Checkpointing, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::models::{check_shape, FeatureNetParams, ModelBundle};
use crate::optim::{adam_update, AdamConfig, Moments};

/// Which observation loss drives the noise update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossMode {
    Pixel,
    PixelFeature,
    Latent,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(LossMode::Pixel),
            "pixel+feature" | "pixel_feature" => Ok(LossMode::PixelFeature),
            "latent" => Ok(LossMode::Latent),
            _ => Err(Error::ModeMismatch(format!("unknown loss mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub lambda: f64,
    pub p: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global L2 cap applied to the noise gradient; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.01,
            lambda: 0.002,
            p: 0.9,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::POutOfRange(self.p));
        }
        if !(self.lr > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("need lr > 0 and lambda >= 0, got {} / {}", self.lr, self.lambda)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub feature: f64,
    pub latent: Option<f64>,
    pub total: f64,
}

/// The optimised sampling noise and its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseState {
    pub eps: Tensor,
    pub moments: Moments,
    pub step_count: u64,
}

impl NoiseState {
    pub fn new(eps: Tensor) -> Self {
        let moments = Moments::zeros_like(&eps);
        NoiseState { eps, moments, step_count: 0 }
    }

    /// Fresh standard normal noise of `shape`.
    pub fn sample<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::new(Tensor::randn(shape, rng))
    }
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// `(1 / d_x) |x_obs - x_pred|_1`.
pub fn loss_pixel(x_obs: &VideoClip, x_pred: &VideoClip) -> Result<f64> {
    check_shape("loss_pixel", x_pred.pixels().shape(), x_obs.pixels().shape())?;
    Ok(mean_abs_diff(x_obs.pixels(), x_pred.pixels()))
}

/// `(1 / d_f) |g(x_obs) - g(x_pred)|_2^2`.
pub fn loss_feature(x_obs: &VideoClip, x_pred: &VideoClip, net: &FeatureNetParams) -> Result<f64> {
    check_shape("loss_feature", x_pred.pixels().shape(), x_obs.pixels().shape())?;
    let a = net.features(x_obs)?;
    let b = net.features(x_pred)?;
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64)
}

/// `(1 / d_z) |z_obs - z_pred|_1`.
pub fn loss_latent(z_obs: &Tensor, z_pred: &Tensor) -> Result<f64> {
    check_shape("loss_latent", z_pred.shape(), z_obs.shape())?;
    Ok(mean_abs_diff(z_obs, z_pred))
}

/// Loss nodes on a tape. `obs` and `pred` are `[1, S, H, W]` in pixel modes
/// and `[1, C, h, w]` latents in latent mode.
pub struct LossVars {
    pub total: Var,
    pub pixel: Option<Var>,
    pub feature: Option<Var>,
    pub latent: Option<Var>,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).data()[0]);
        LossBreakdown {
            pixel: get(self.pixel).unwrap_or(0.0),
            feature: get(self.feature).unwrap_or(0.0),
            latent: get(self.latent),
            total: tape.value(self.total).data()[0],
        }
    }
}

pub fn loss_on_tape(
    tape: &mut Tape,
    mode: LossMode,
    config: &OptimConfig,
    net: &FeatureNetParams,
    obs: Var,
    pred: Var,
) -> Result<LossVars> {
    let shape = tape.shape(pred).to_vec();
    check_shape("total_loss", tape.shape(obs), &shape)?;
    let clip = net_clip_dims(net);
    let is_pixel = shape.len() == 4 && shape[1..] == clip;
    match mode {
        LossMode::Pixel | LossMode::PixelFeature if !is_pixel => {
            return Err(Error::ModeMismatch(format!("{mode:?} mode needs pixel clips, got {shape:?}")));
        }
        LossMode::Latent if is_pixel => {
            return Err(Error::ModeMismatch(format!("latent mode needs latents, got pixel clip {shape:?}")));
        }
        _ => {}
    }
    let diff = tape.sub(obs, pred)?;
    let a = tape.abs(diff)?;
    let l1 = tape.mean(a)?;
    match mode {
        LossMode::Latent => Ok(LossVars { total: l1, pixel: None, feature: None, latent: Some(l1) }),
        LossMode::Pixel => Ok(LossVars { total: l1, pixel: Some(l1), feature: None, latent: None }),
        LossMode::PixelFeature => {
            let fo = net.forward(tape, obs)?;
            let fp = net.forward(tape, pred)?;
            let d = tape.sub(fo, fp)?;
            let sq = tape.square(d)?;
            let feat = tape.mean(sq)?;
            // With lambda = 0 the feature term is reported but kept off the gradient path.
            let total = if config.lambda == 0.0 {
                l1
            } else {
                let w = tape.scale(feat, config.lambda)?;
                tape.add(l1, w)?
            };
            Ok(LossVars { total, pixel: Some(l1), feature: Some(feat), latent: None })
        }
    }
}

fn net_clip_dims(net: &FeatureNetParams) -> [usize; 3] {
    net.config().clip.dims()
}

fn batched(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshaped(&shape)
}

/// Value-level loss. Pixel modes take clips `[S, H, W]`, latent mode takes latents.
pub fn total_loss(
    x_obs: &Tensor,
    x_pred: &Tensor,
    config: &OptimConfig,
    net: &FeatureNetParams,
    mode: LossMode,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let o = tape.constant(batched(x_obs)?);
    let p = tape.constant(batched(x_pred)?);
    let vars = loss_on_tape(&mut tape, mode, config, net, o, p)?;
    Ok(vars.breakdown(&tape))
}

/// `(p eps_opt + (1 - p) eps_fresh) / sqrt(p^2 + (1 - p)^2)`; endpoints return an input unchanged.
pub fn interpolate_noise(p: f64, eps_opt: &Tensor, eps_fresh: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let a = tape.constant(eps_opt.clone());
    let b = tape.constant(eps_fresh.clone());
    let h = interpolate_on_tape(&mut tape, p, a, b)?;
    Ok(tape.value(h).clone())
}

pub fn interpolate_on_tape(tape: &mut Tape, p: f64, eps_opt: Var, eps_fresh: Var) -> Result<Var> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::POutOfRange(p));
    }
    check_shape("interpolate_noise", tape.shape(eps_fresh), tape.shape(eps_opt))?;
    if p == 1.0 {
        return Ok(eps_opt);
    }
    if p == 0.0 {
        return Ok(eps_fresh);
    }
    let norm = (p * p + (1.0 - p) * (1.0 - p)).sqrt();
    let a = tape.scale(eps_opt, p / norm)?;
    let b = tape.scale(eps_fresh, (1.0 - p) / norm)?;
    tape.add(a, b)
}

/// One Adam update of the noise, after optional global-norm clipping.
pub fn optimize_noise_step(state: &mut NoiseState, grad: &Tensor, config: &OptimConfig) -> Result<()> {
    check_shape("optimize_noise_step", grad.shape(), state.eps.shape())?;
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let mut g = grad.clone();
    if let Some(cap) = config.clip_norm {
        crate::optim::clip_global_norm(std::slice::from_mut(&mut g), cap);
    }
    state.step_count += 1;
    adam_update(&mut state.eps, &g, &mut state.moments, state.step_count, &config.adam());
    Ok(())
}

/// A prediction finalised before its target is observed, holding whatever is
/// needed to backpropagate the observation loss into the noise afterwards.
pub struct PendingPrediction {
    pub x_pred: VideoClip,
    pub z_pred: Tensor,
    pub eps_fresh: Tensor,
    graph: Option<Graph>,
}

struct Graph {
    tape: Tape,
    eps: Var,
    out: Var,
}

/// Everything fixed across one stream: frozen networks, schedule, sampler and loss settings.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub bundle: ModelBundle,
    pub schedule: NoiseSchedule,
    pub sampler: SamplerConfig,
    pub config: OptimConfig,
    pub mode: LossMode,
    pub checkpointing: Checkpointing,
}

impl Adapter {
    pub fn new(bundle: ModelBundle, schedule: NoiseSchedule, sampler: SamplerConfig, config: OptimConfig, mode: LossMode) -> Result<Self> {
        config.validate()?;
        sampler.timesteps(schedule.steps())?;
        Ok(Adapter { bundle, schedule, sampler, config, mode, checkpointing: Checkpointing::PerStep })
    }

    /// Forward pass from `h(p, eps_s, eps_fresh)`; the graph is kept only when `track` is set.
    fn forward(&self, z_cond: &Tensor, eps: &Tensor, eps_fresh: &Tensor, track: bool, rng_noise: &[Tensor]) -> Result<(Graph, Var)> {
        if self.sampler.eta != 0.0 && track {
            return Err(Error::InvalidConfig("noise optimisation needs eta = 0".into()));
        }
        let mut tape = Tape::new();
        let e = tape.leaf(batched(eps)?, track);
        let f = tape.constant(batched(eps_fresh)?);
        let c = tape.constant(batched(z_cond)?);
        let h = interpolate_on_tape(&mut tape, self.config.p, e, f)?;
        let rand: Vec<Var> = rng_noise.iter().map(|r| tape.constant(r.clone())).collect();
        let z = sample_on_tape(&mut tape, &self.bundle.denoiser, &self.schedule, &self.sampler, c, h, &rand, self.checkpointing)?;
        let out = match self.mode {
            LossMode::Latent => z,
            _ => {
                let ae = self.bundle.autoencoder.bind(&mut tape, false);
                ae.decode(&mut tape, z)?
            }
        };
        Ok((Graph { tape, eps: e, out }, z))
    }

    /// Draw fresh noise and predict the next clip from `z_cond`. Set `track`
    /// when the prediction will be adapted on.
    pub fn predict<R: Rng + ?Sized>(&self, z_cond: &Tensor, state: &NoiseState, track: bool, rng: &mut R) -> Result<PendingPrediction> {
        let dims = self.bundle.config().latent_dims();
        check_shape("predict", z_cond.shape(), &dims)?;
        let eps_fresh = Tensor::randn(&dims, rng);
        let mut extra = Vec::new();
        if self.sampler.eta > 0.0 {
            for _ in 0..self.sampler.num_steps {
                extra.push(Tensor::randn(&self.bundle.config().latent_batched(1), rng));
            }
        }
        let (graph, z) = self.forward(z_cond, &state.eps, &eps_fresh, track, &extra)?;
        let z_pred = graph.tape.value(z).clone().reshaped(&dims)?;
        let x_pred = match self.mode {
            LossMode::Latent => self.bundle.autoencoder.decode(&z_pred)?,
            _ => VideoClip::new(graph.tape.value(graph.out).clone().reshaped(&self.bundle.config().clip.dims())?)?,
        };
        Ok(PendingPrediction { x_pred, z_pred, eps_fresh, graph: if track { Some(graph) } else { None } })
    }

    /// Loss of a finalised prediction against its observation, without adapting.
    pub fn score(&self, pending: &PendingPrediction, x_obs: &VideoClip, z_obs: Option<&Tensor>) -> Result<LossBreakdown> {
        match self.mode {
            LossMode::Latent => {
                let z = self.observed_latent(x_obs, z_obs)?;
                total_loss(&z, &pending.z_pred, &self.config, &self.bundle.features, LossMode::Latent)
            }
            mode => total_loss(x_obs.pixels(), pending.x_pred.pixels(), &self.config, &self.bundle.features, mode),
        }
    }

    fn observed_latent(&self, x_obs: &VideoClip, z_obs: Option<&Tensor>) -> Result<Tensor> {
        match z_obs {
            Some(z) => Ok(z.clone()),
            None => self.bundle.autoencoder.encode(x_obs),
        }
    }

    /// Backpropagate the observation loss into `state.eps` through `h` and take
    /// `repeats` Adam steps (later repeats re-run the forward with the same
    /// fresh noise). Returns the loss of the original prediction.
    pub fn adapt(
        &self,
        pending: PendingPrediction,
        z_cond: &Tensor,
        x_obs: &VideoClip,
        z_obs: Option<&Tensor>,
        state: &mut NoiseState,
        repeats: usize,
    ) -> Result<LossBreakdown> {
        if repeats == 0 {
            return Err(Error::Precondition("adapt needs at least one repeat".into()));
        }
        let target = match self.mode {
            LossMode::Latent => batched(&self.observed_latent(x_obs, z_obs)?)?,
            _ => x_obs.batched(),
        };
        let eps_fresh = pending.eps_fresh;
        let mut graph = match pending.graph {
            Some(g) => g,
            None => self.forward(z_cond, &state.eps, &eps_fresh, true, &[])?.0,
        };
        let mut first = None;
        for r in 0..repeats {
            if r > 0 {
                graph = self.forward(z_cond, &state.eps, &eps_fresh, true, &[])?.0;
            }
            let Graph { mut tape, eps, out } = graph;
            let obs = tape.constant(target.clone());
            let loss = loss_on_tape(&mut tape, self.mode, &self.config, &self.bundle.features, obs, out)?;
            let breakdown = loss.breakdown(&tape);
            first.get_or_insert(breakdown);
            let grad = match tape.backward(loss.total)?.take(eps) {
                Some(g) => g.reshaped(state.eps.shape())?,
                None => Tensor::zeros(state.eps.shape()),
            };
            optimize_noise_step(state, &grad, &self.config)?;
            graph = Graph { tape: Tape::new(), eps, out };
        }
        Ok(first.expect("at least one repeat"))
    }

    /// Gradient of the observation loss w.r.t. `eps` for a given fresh noise, without updating.
    pub fn noise_gradient(&self, z_cond: &Tensor, eps: &Tensor, eps_fresh: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        let (graph, _) = self.forward(z_cond, eps, eps_fresh, true, &[])?;
        let Graph { mut tape, eps: ev, out } = graph;
        let obs = tape.constant(batched(target)?);
        let loss = loss_on_tape(&mut tape, self.mode, &self.config, &self.bundle.features, obs, out)?;
        let value = tape.value(loss.total).data()[0];
        let grad = match tape.backward(loss.total)?.take(ev) {
            Some(g) => g.reshaped(eps.shape())?,
            None => Tensor::zeros(eps.shape()),
        };
        Ok((value, grad))
    }

    /// Observation loss for a given `eps` and fresh noise, no gradient.
    pub fn loss_value(&self, z_cond: &Tensor, eps: &Tensor, eps_fresh: &Tensor, target: &Tensor) -> Result<f64> {
        let (graph, _) = self.forward(z_cond, eps, eps_fresh, false, &[])?;
        let Graph { mut tape, out, .. } = graph;
        let obs = tape.constant(batched(target)?);
        let loss = loss_on_tape(&mut tape, self.mode, &self.config, &self.bundle.features, obs, out)?;
        Ok(tape.value(loss.total).data()[0])
    }
}

/// Predict the next clip from `z_cond`, score it against `x_next_obs`, and take one Adam step on the noise.
pub fn predict_and_adapt<R: Rng + ?Sized>(
    adapter: &Adapter,
    z_cond: &Tensor,
    x_next_obs: &VideoClip,
    state: &mut NoiseState,
    rng: &mut R,
) -> Result<(VideoClip, LossBreakdown)> {
    let pending = adapter.predict(z_cond, state, true, rng)?;
    let x_pred = pending.x_pred.clone();
    let loss = adapter.adapt(pending, z_cond, x_next_obs, None, state, 1)?;
    Ok((x_pred, loss))
}
