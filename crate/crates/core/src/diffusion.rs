//! Noise schedule, DDIM sampling and inversion, the denoiser training loss and
//! the weight fine-tuning baseline.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{check_shape, BoundDenoiser, DenoiserParams, ModelConfig, TrainReport};
use crate::optim::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Total diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_1 .. beta_T`.
    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `alpha_bar_1 .. alpha_bar_T`.
    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Cumulative product at `t`, with `alpha(0) = 1`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alpha_bar[t - 1]),
            t => Err(Error::TimestepOutOfRange { t, max: self.steps() }),
        }
    }
}

/// Linearly spaced betas from `beta_start` to `beta_end`.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidRange("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!("need 0 < {beta_start} <= {beta_end} < 1")));
    }
    // The last value is pinned so that a stored schedule can be rebuilt from its endpoints.
    let beta: Vec<f64> = (0..steps)
        .map(|i| match i {
            0 => beta_start,
            i if i == steps - 1 => beta_end,
            i => beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64,
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: 10, eta: 0.0 }
    }
}

impl SamplerConfig {
    /// Uniformly spaced timesteps `floor(i T / n)` for `i = 1..n`, ascending and ending at `T`.
    pub fn timesteps(&self, total: usize) -> Result<Vec<usize>> {
        if self.num_steps == 0 || self.num_steps > total {
            return Err(Error::InvalidConfig(format!("num_steps {} must be in 1..={total}", self.num_steps)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok((1..=self.num_steps).map(|i| i * total / self.num_steps).collect())
    }
}

pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<f64> {
    if t_prev >= t {
        return Err(Error::InvalidTimesteps { t, t_prev });
    }
    let a_t = schedule.alpha(t)?;
    let a_prev = schedule.alpha(t_prev)?;
    if eta == 0.0 {
        return Ok(0.0);
    }
    Ok(eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt())
}

/// Scalar coefficients of one DDIM update `t -> t_prev`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoeffs {
    pub sqrt_alpha_t: f64,
    pub sqrt_one_minus_alpha_t: f64,
    pub sqrt_alpha_prev: f64,
    pub direction: f64,
    pub sigma: f64,
}

impl StepCoeffs {
    pub fn new(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> Result<Self> {
        let sigma = ddim_sigma(schedule, t, t_prev, eta)?;
        let a_t = schedule.alpha(t)?;
        let a_prev = schedule.alpha(t_prev)?;
        let radicand = 1.0 - a_prev - sigma * sigma;
        // Rounding can leave a tiny negative value at eta = 1.
        let radicand = if radicand < 0.0 && radicand > -1e-12 { 0.0 } else { radicand };
        if radicand < 0.0 {
            return Err(Error::NegativeRadicand(radicand));
        }
        Ok(StepCoeffs {
            sqrt_alpha_t: a_t.sqrt(),
            sqrt_one_minus_alpha_t: (1.0 - a_t).sqrt(),
            sqrt_alpha_prev: a_prev.sqrt(),
            direction: radicand.sqrt(),
            sigma,
        })
    }

    /// `sqrt(a_prev) x0 + direction eps_hat + sigma eps_rand` with
    /// `x0 = (z_t - sqrt(1 - a_t) eps_hat) / sqrt(a_t)`.
    pub fn apply(&self, tape: &mut Tape, z_t: Var, eps_hat: Var, eps_rand: Option<Var>) -> Result<Var> {
        let noise_part = tape.scale(eps_hat, self.sqrt_one_minus_alpha_t)?;
        let diff = tape.sub(z_t, noise_part)?;
        let x0 = tape.scale(diff, 1.0 / self.sqrt_alpha_t)?;
        let a = tape.scale(x0, self.sqrt_alpha_prev)?;
        let b = tape.scale(eps_hat, self.direction)?;
        let mut out = tape.add(a, b)?;
        if let Some(r) = eps_rand {
            if self.sigma != 0.0 {
                let c = tape.scale(r, self.sigma)?;
                out = tape.add(out, c)?;
            }
        }
        Ok(out)
    }
}

/// Value-level DDIM update.
pub fn ddim_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: usize,
    eta: f64,
    eps_rand: &Tensor,
) -> Result<Tensor> {
    check_shape("ddim_step", eps_hat.shape(), z_t.shape())?;
    check_shape("ddim_step", eps_rand.shape(), z_t.shape())?;
    let coeffs = StepCoeffs::new(schedule, t, t_prev, eta)?;
    let mut tape = Tape::new();
    let z = tape.constant(z_t.clone());
    let e = tape.constant(eps_hat.clone());
    let r = tape.constant(eps_rand.clone());
    let out = coeffs.apply(&mut tape, z, e, Some(r))?;
    Ok(tape.value(out).clone())
}

/// Anything that maps `(z_t, t, cond)` batches to noise estimates on a tape.
pub trait NoisePredictor {
    fn predict(&self, tape: &mut Tape, z_t: Var, ts: &[usize], cond: Var) -> Result<Var>;

    fn timesteps(&self) -> usize;
}

impl NoisePredictor for DenoiserParams {
    fn predict(&self, tape: &mut Tape, z_t: Var, ts: &[usize], cond: Var) -> Result<Var> {
        let bound = self.bind(tape, false);
        bound.predict(tape, z_t, ts, cond)
    }

    fn timesteps(&self) -> usize {
        self.config.timesteps
    }
}

impl NoisePredictor for BoundDenoiser {
    fn predict(&self, tape: &mut Tape, z_t: Var, ts: &[usize], cond: Var) -> Result<Var> {
        BoundDenoiser::predict(self, tape, z_t, ts, cond)
    }

    fn timesteps(&self) -> usize {
        self.config.timesteps
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Arc<P> {
    fn predict(&self, tape: &mut Tape, z_t: Var, ts: &[usize], cond: Var) -> Result<Var> {
        (**self).predict(tape, z_t, ts, cond)
    }

    fn timesteps(&self) -> usize {
        (**self).timesteps()
    }
}

/// Whether each sampling step becomes a checkpoint segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Checkpointing {
    PerStep,
    Off,
}

fn check_schedule<P: NoisePredictor + ?Sized>(model: &P, schedule: &NoiseSchedule) -> Result<()> {
    if model.timesteps() != schedule.steps() {
        return Err(Error::InvalidConfig(format!(
            "denoiser trained for T={} but schedule has T={}",
            model.timesteps(),
            schedule.steps()
        )));
    }
    Ok(())
}

/// Differentiable DDIM chain from `z_T = eps_init` down to the `t = 0` estimate.
///
/// `eps_rand` holds one explicit noise tensor per step and is required when `eta > 0`.
pub fn sample_on_tape<P>(
    tape: &mut Tape,
    model: &Arc<P>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    z_cond: Var,
    eps_init: Var,
    eps_rand: &[Var],
    checkpointing: Checkpointing,
) -> Result<Var>
where
    P: NoisePredictor + Send + Sync + ?Sized + 'static,
{
    check_schedule(model.as_ref(), schedule)?;
    let ts = config.timesteps(schedule.steps())?;
    if config.eta > 0.0 && eps_rand.len() != ts.len() {
        return Err(Error::InvalidConfig(format!("need {} step noises for eta > 0, got {}", ts.len(), eps_rand.len())));
    }
    check_shape("sample", tape.shape(eps_init), tape.shape(z_cond))?;
    let batch = tape.shape(eps_init)[0];
    let mut z = eps_init;
    for (i, &t) in ts.iter().enumerate().rev() {
        let t_prev = if i == 0 { 0 } else { ts[i - 1] };
        let coeffs = StepCoeffs::new(schedule, t, t_prev, config.eta)?;
        let rand = if config.eta > 0.0 { Some(eps_rand[ts.len() - 1 - i]) } else { None };
        let step_ts = vec![t; batch];
        let m = Arc::clone(model);
        let step = move |tp: &mut Tape, ins: &[Var]| -> Result<Vec<Var>> {
            let eps_hat = m.predict(tp, ins[0], &step_ts, ins[1])?;
            Ok(vec![coeffs.apply(tp, ins[0], eps_hat, ins.get(2).copied())?])
        };
        let mut inputs = vec![z, z_cond];
        inputs.extend(rand);
        z = match checkpointing {
            Checkpointing::PerStep => tape.checkpoint(&inputs, step)?[0],
            Checkpointing::Off => step(tape, &inputs)?[0],
        };
    }
    Ok(z)
}

fn batched(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshaped(&shape)
}

/// Value-level sampling of one latent clip. `rng` is only drawn from when `eta > 0`.
pub fn sample<P, R>(
    model: &Arc<P>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    z_cond: &Tensor,
    eps_init: &Tensor,
    rng: &mut R,
) -> Result<Tensor>
where
    P: NoisePredictor + Send + Sync + ?Sized + 'static,
    R: Rng + ?Sized,
{
    check_shape("sample", eps_init.shape(), z_cond.shape())?;
    let mut tape = Tape::new();
    let c = tape.constant(batched(z_cond)?);
    let e = tape.constant(batched(eps_init)?);
    let mut rand = Vec::new();
    if config.eta > 0.0 {
        for _ in 0..config.timesteps(schedule.steps())?.len() {
            let r = Tensor::randn(tape.shape(e), rng);
            rand.push(tape.constant(r));
        }
    }
    let z = sample_on_tape(&mut tape, model, schedule, config, c, e, &rand, Checkpointing::Off)?;
    tape.value(z).clone().reshaped(z_cond.shape())
}

/// Deterministic DDIM inversion: runs the update from `t = 0` up to `T`, each
/// step using the noise estimate at the current iterate and the target timestep.
pub fn ddim_invert<P>(
    model: &P,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    z_cond: &Tensor,
    z_target: &Tensor,
) -> Result<Tensor>
where
    P: NoisePredictor + ?Sized,
{
    if config.eta != 0.0 {
        return Err(Error::EtaNonZero(config.eta));
    }
    check_schedule(model, schedule)?;
    check_shape("ddim_invert", z_target.shape(), z_cond.shape())?;
    let ts = config.timesteps(schedule.steps())?;
    let mut z = batched(z_target)?;
    let cond = batched(z_cond)?;
    let mut t_prev = 0;
    for &t in &ts {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let cv = tape.constant(cond.clone());
        let eps = model.predict(&mut tape, zv, &[t], cv)?;
        let a_prev = schedule.alpha(t_prev)?;
        let a_t = schedule.alpha(t)?;
        let noise_part = tape.scale(eps, (1.0 - a_prev).sqrt())?;
        let diff = tape.sub(zv, noise_part)?;
        let x0 = tape.scale(diff, 1.0 / a_prev.sqrt())?;
        let a = tape.scale(x0, a_t.sqrt())?;
        let b = tape.scale(eps, (1.0 - a_t).sqrt())?;
        let next = tape.add(a, b)?;
        z = tape.value(next).clone();
        t_prev = t;
    }
    z.reshaped(z_target.shape())
}

/// `mean((eps - eps_theta(sqrt(a_t) z + sqrt(1 - a_t) eps, t, cond))^2)` for given `ts`, `eps`.
/// `z_future`, `z_cond` and `eps` are `[N, C, h, w]`.
pub fn ddpm_loss_fixed<P>(
    tape: &mut Tape,
    model: &P,
    schedule: &NoiseSchedule,
    z_future: Var,
    z_cond: Var,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Var>
where
    P: NoisePredictor + ?Sized,
{
    let shape = tape.shape(z_future).to_vec();
    check_shape("ddpm_loss", eps.shape(), &shape)?;
    check_shape("ddpm_loss", tape.shape(z_cond), &shape)?;
    if ts.len() != shape[0] {
        return Err(Error::shape("ddpm_loss", format!("{} timesteps for batch {}", ts.len(), shape[0])));
    }
    let mut bcast = vec![1; shape.len()];
    bcast[0] = shape[0];
    let alphas = ts.iter().map(|&t| schedule.alpha(t)).collect::<Result<Vec<_>>>()?;
    let sa = tape.constant(Tensor::new(bcast.clone(), alphas.iter().map(|a| a.sqrt()).collect())?);
    let sb = tape.constant(Tensor::new(bcast, alphas.iter().map(|a| (1.0 - a).sqrt()).collect())?);
    let e = tape.constant(eps.clone());
    let signal = tape.mul(z_future, sa)?;
    let noise = tape.mul(e, sb)?;
    let z_t = tape.add(signal, noise)?;
    let out = model.predict(tape, z_t, ts, z_cond)?;
    let diff = tape.sub(out, e)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}

/// Denoiser training loss with `t ~ U{1..T}` and `eps ~ N(0, I)` drawn per batch row.
pub fn ddpm_training_loss<P, R>(
    tape: &mut Tape,
    model: &P,
    schedule: &NoiseSchedule,
    z_future: Var,
    z_cond: Var,
    rng: &mut R,
) -> Result<Var>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let shape = tape.shape(z_future).to_vec();
    let ts: Vec<usize> = (0..shape[0]).map(|_| rng.random_range(1..=schedule.steps())).collect();
    let eps = Tensor::randn(&shape, rng);
    ddpm_loss_fixed(tape, model, schedule, z_future, z_cond, &ts, &eps)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    /// Probability of replacing the condition with zeros.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig { iterations: 12000, lr: 2e-3, batch: 16, cond_dropout: 0.3, seed: 0 }
    }
}

/// Train the conditional denoiser on `(z_cond, z_future)` latent pairs.
pub fn train_denoiser(
    pairs: &[(Tensor, Tensor)],
    config: ModelConfig,
    schedule: &NoiseSchedule,
    train: &DenoiserTrainConfig,
) -> Result<(DenoiserParams, TrainReport)> {
    let mut params = DenoiserParams::init(config, train.seed)?;
    check_schedule(&params, schedule)?;
    let mut report = TrainReport::default();
    if train.iterations == 0 {
        return Ok((params, report));
    }
    if pairs.is_empty() || train.batch == 0 {
        return Err(Error::InvalidConfig("denoiser training needs latent pairs and a positive batch".into()));
    }
    let dims = config.latent_dims();
    for (c, f) in pairs {
        check_shape("train_denoiser", c.shape(), &dims)?;
        check_shape("train_denoiser", f.shape(), &dims)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(0x5eed));
    let adam = AdamConfig { lr: train.lr, ..AdamConfig::default() };
    let mut state = AdamState::new(params.tensors());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    for iteration in 0..train.iterations {
        let mut idx = Vec::with_capacity(train.batch);
        while idx.len() < train.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let n = idx.len();
        let mut cond = Vec::with_capacity(n * dims.iter().product::<usize>());
        let mut fut = Vec::with_capacity(cond.capacity());
        for &i in &idx {
            let keep = !rng.random_bool(train.cond_dropout);
            cond.extend(pairs[i].0.data().iter().map(|&v| if keep { v } else { 0.0 }));
            fut.extend_from_slice(pairs[i].1.data());
        }
        let shape = config.latent_batched(n).to_vec();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let c = tape.constant(Tensor::new(shape.clone(), cond)?);
        let f = tape.constant(Tensor::new(shape, fut)?);
        let loss = ddpm_training_loss(&mut tape, &bound, schedule, f, c, &mut rng)
            .map_err(|_| Error::DivergedTraining { iteration })?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::DivergedTraining { iteration });
        }
        report.losses.push(value);
        let vars = bound.vars();
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("trainable")).collect();
        state.update(params.tensors_mut(), &g, &adam);
    }
    Ok((params, report))
}

/// Diffusion-loss fine-tuning of the denoiser weights on the stream, with Adam
/// moments kept across observations.
#[derive(Clone, Debug)]
pub struct FineTuner {
    pub params: DenoiserParams,
    pub adam: AdamState,
    pub lr: f64,
}

impl FineTuner {
    pub fn new(params: DenoiserParams, lr: f64) -> Self {
        let adam = AdamState::new(params.tensors());
        FineTuner { params, adam, lr }
    }

    /// `n_inner` gradient steps on freshly drawn `(t, eps)`. Returns the mean loss.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        schedule: &NoiseSchedule,
        z_future: &Tensor,
        z_cond: &Tensor,
        n_inner: usize,
        rng: &mut R,
    ) -> Result<f64> {
        if n_inner == 0 {
            return Err(Error::Precondition("finetune_step needs n_inner >= 1".into()));
        }
        let mut total = 0.0;
        for iteration in 0..n_inner {
            let ts = [rng.random_range(1..=schedule.steps())];
            let eps = Tensor::randn(batched(z_future)?.shape(), rng);
            total += self.step_fixed(schedule, z_future, z_cond, &ts, &eps, iteration)?;
        }
        Ok(total / n_inner as f64)
    }

    /// One Adam step on a fixed `(t, eps)` draw. Returns the loss before the update.
    pub fn step_fixed(
        &mut self,
        schedule: &NoiseSchedule,
        z_future: &Tensor,
        z_cond: &Tensor,
        ts: &[usize],
        eps: &Tensor,
        iteration: usize,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let f = tape.constant(batched(z_future)?);
        let c = tape.constant(batched(z_cond)?);
        let loss = ddpm_loss_fixed(&mut tape, &bound, schedule, f, c, ts, eps)?;
        let value = tape.value(loss).data()[0];
        let vars = bound.vars();
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("trainable")).collect();
        if !value.is_finite() || g.iter().any(|t| !t.is_finite()) {
            return Err(Error::DivergedTraining { iteration });
        }
        let adam = AdamConfig { lr: self.lr, ..AdamConfig::default() };
        self.adam.update(self.params.tensors_mut(), &g, &adam);
        Ok(value)
    }
}

/// Apply `n_inner` diffusion-loss steps and return the updated weights.
pub fn finetune_step<R: Rng + ?Sized>(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    z_future: &Tensor,
    z_cond: &Tensor,
    n_inner: usize,
    lr: f64,
    rng: &mut R,
) -> Result<DenoiserParams> {
    let mut tuner = FineTuner::new(params.clone(), lr);
    tuner.step(schedule, z_future, z_cond, n_inner, rng)?;
    Ok(tuner.params)
}
