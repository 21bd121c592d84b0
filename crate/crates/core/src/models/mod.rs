//! The toy networks: autoencoder (E, D), conditional noise predictor, and
//! the frozen feature network used by the feature loss and the Fréchet metric.

mod layers;
mod train;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use layers::{BoundConv, BoundLinear, Conv, Linear};
pub use train::{reconstruction_l1, train_autoencoder, AeTrainConfig, TrainReport};

use crate::data::{ClipShape, VideoClip};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Architecture sizes shared by all three networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub clip: ClipShape,
    /// Latent channels per latent frame (c_z).
    pub latent_channels: usize,
    /// Latent frames (S_z); must equal the pixel frame count.
    pub latent_frames: usize,
    pub ae_hidden: usize,
    pub denoiser_hidden: usize,
    pub time_embed: usize,
    pub feature_dim: usize,
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            clip: ClipShape::default(),
            latent_channels: 2,
            latent_frames: 4,
            ae_hidden: 16,
            denoiser_hidden: 32,
            time_embed: 16,
            feature_dim: 32,
            timesteps: 100,
        }
    }
}

/// Spatial reduction of the encoder (three stride-2 stages).
pub const DOWNSAMPLE: usize = 8;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.clip;
        if !c.height.is_multiple_of(DOWNSAMPLE) || !c.width.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::InvalidConfig(format!("clip {}x{} not divisible by {DOWNSAMPLE}", c.height, c.width)));
        }
        if self.latent_frames != c.frames {
            return Err(Error::InvalidConfig("latent_frames must equal clip frames".into()));
        }
        if !self.time_embed.is_multiple_of(2) || self.time_embed == 0 {
            return Err(Error::InvalidConfig("time_embed must be even and positive".into()));
        }
        if [self.latent_channels, self.ae_hidden, self.denoiser_hidden, self.feature_dim, self.timesteps].contains(&0) {
            return Err(Error::InvalidConfig("zero-sized model dimension".into()));
        }
        Ok(())
    }

    /// `[c_z * S_z, h_z, w_z]`.
    pub fn latent_dims(&self) -> [usize; 3] {
        [self.latent_channels * self.latent_frames, self.clip.height / DOWNSAMPLE, self.clip.width / DOWNSAMPLE]
    }

    pub fn latent_numel(&self) -> usize {
        self.latent_dims().iter().product()
    }

    pub fn latent_batched(&self, n: usize) -> [usize; 4] {
        let [c, h, w] = self.latent_dims();
        [n, c, h, w]
    }
}

pub(crate) fn check_shape(op: &'static str, got: &[usize], want: &[usize]) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected {want:?}, got {got:?}")))
    }
}

/// FNV-1a over the bit patterns of a tensor list.
pub fn checksum<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for t in tensors {
        for &d in t.shape() {
            for b in (d as u64).to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
        }
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
        }
    }
    h
}

fn meta(values: &[usize]) -> Tensor {
    Tensor::from_vec(values.iter().map(|&v| v as f64).collect())
}

fn take_meta(tensors: &mut std::vec::IntoIter<Tensor>, what: &str, len: usize) -> Result<Vec<usize>> {
    let t = tensors.next().ok_or_else(|| Error::InvalidConfig(format!("{what}: empty parameter file")))?;
    if t.len() != len {
        return Err(Error::InvalidConfig(format!("{what}: header has {} fields, expected {len}", t.len())));
    }
    Ok(t.data().iter().map(|&v| v as usize).collect())
}

fn take_into(tensors: &mut std::vec::IntoIter<Tensor>, slots: Vec<&mut Tensor>, what: &str) -> Result<()> {
    for slot in slots {
        let t = tensors.next().ok_or_else(|| Error::InvalidConfig(format!("{what}: truncated parameter list")))?;
        check_shape("load_params", t.shape(), slot.shape())?;
        *slot = t;
    }
    Ok(())
}

// ---------------------------------------------------------------- autoencoder

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencoderParams {
    pub config: ModelConfig,
    pub encoder: [Conv; 3],
    pub decoder: [Conv; 4],
    /// Multiplies raw encoder output so latents have roughly unit variance.
    pub latent_scale: f64,
}

pub struct BoundAutoencoder {
    pub config: ModelConfig,
    pub encoder: [BoundConv; 3],
    pub decoder: [BoundConv; 4],
    pub latent_scale: f64,
}

impl AutoencoderParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = config.clip.frames;
        let h = config.ae_hidden;
        let lc = config.latent_dims()[0];
        let g = 1.6;
        Ok(AutoencoderParams {
            config,
            encoder: [
                Conv::init(s, h, 3, 2, 1, g, &mut rng),
                Conv::init(h, 2 * h, 3, 2, 1, g, &mut rng),
                Conv::init(2 * h, lc, 3, 2, 1, 1.0, &mut rng),
            ],
            decoder: [
                Conv::init(lc, 2 * h, 3, 1, 1, g, &mut rng),
                Conv::init(2 * h, h, 3, 1, 1, g, &mut rng),
                Conv::init(h, h, 3, 1, 1, g, &mut rng),
                Conv::init(h, s, 3, 1, 1, 1.0, &mut rng),
            ],
            latent_scale: 1.0,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAutoencoder {
        BoundAutoencoder {
            config: self.config,
            encoder: self.encoder.each_ref().map(|c| c.bind(tape, trainable)),
            decoder: self.decoder.each_ref().map(|c| c.bind(tape, trainable)),
            latent_scale: self.latent_scale,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.encoder.iter().chain(&self.decoder).flat_map(|c| c.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder.iter_mut().chain(&mut self.decoder).flat_map(|c| c.tensors_mut()).collect()
    }

    /// Clip `[S, H, W]` to latent `[c_z * S_z, h_z, w_z]`.
    pub fn encode(&self, x: &VideoClip) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.batched());
        let z = bound.encode(&mut tape, xv)?;
        tape.value(z).clone().reshaped(&self.config.latent_dims())
    }

    pub fn decode(&self, z: &Tensor) -> Result<VideoClip> {
        check_shape("decode", z.shape(), &self.config.latent_dims())?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone().reshaped(&self.config.latent_batched(1))?);
        let x = bound.decode(&mut tape, zv)?;
        VideoClip::new(tape.value(x).clone().reshaped(&self.config.clip.dims())?)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let c = &self.config;
        let mut out = vec![
            meta(&[c.clip.frames, c.clip.height, c.clip.width, c.latent_channels, c.latent_frames, c.ae_hidden]),
            Tensor::scalar(self.latent_scale),
        ];
        out.extend(self.tensors().into_iter().cloned());
        out
    }

    pub fn from_tensors(tensors: Vec<Tensor>, config: ModelConfig) -> Result<Self> {
        let mut it = tensors.into_iter();
        let m = take_meta(&mut it, "autoencoder", 6)?;
        let c = &config;
        if m != [c.clip.frames, c.clip.height, c.clip.width, c.latent_channels, c.latent_frames, c.ae_hidden] {
            return Err(Error::InvalidConfig(format!("autoencoder file built for {m:?}")));
        }
        let mut p = AutoencoderParams::init(config, 0)?;
        p.latent_scale = it.next().and_then(|t| t.item()).ok_or_else(|| Error::InvalidConfig("missing latent scale".into()))?;
        take_into(&mut it, p.tensors_mut(), "autoencoder")?;
        Ok(p)
    }
}

impl BoundAutoencoder {
    /// `[N, S, H, W] -> [N, c_z * S_z, h_z, w_z]`.
    pub fn encode(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = self.config.clip;
        let s = tape.shape(x);
        if s.len() != 4 || s[1..] != [c.frames, c.height, c.width] {
            return Err(Error::shape("encode", format!("expected [N, {}, {}, {}], got {s:?}", c.frames, c.height, c.width)));
        }
        let h = self.encoder[0].forward(tape, x)?;
        let h = tape.silu(h)?;
        let h = self.encoder[1].forward(tape, h)?;
        let h = tape.silu(h)?;
        let z = self.encoder[2].forward(tape, h)?;
        tape.scale(z, self.latent_scale)
    }

    /// `[N, c_z * S_z, h_z, w_z] -> [N, S, H, W]` with values in `(0, 1)`.
    pub fn decode(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let want = self.config.latent_dims();
        let s = tape.shape(z);
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape("decode", format!("expected [N, {want:?}], got {s:?}")));
        }
        let h = tape.scale(z, 1.0 / self.latent_scale)?;
        let h = self.decoder[0].forward(tape, h)?;
        let mut h = tape.silu(h)?;
        for conv in &self.decoder[1..3] {
            h = tape.upsample(h, 2)?;
            h = conv.forward(tape, h)?;
            h = tape.silu(h)?;
        }
        h = tape.upsample(h, 2)?;
        let out = self.decoder[3].forward(tape, h)?;
        tape.sigmoid(out)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.encoder.iter().chain(&self.decoder).flat_map(|c| c.vars()).collect()
    }
}

// ---------------------------------------------------------------- denoiser

/// Conditional noise predictor over latent clips.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: ModelConfig,
    pub input: Conv,
    pub time: Linear,
    pub middle: [Conv; 2],
    pub output: Conv,
}

pub struct BoundDenoiser {
    pub config: ModelConfig,
    pub input: BoundConv,
    pub time: BoundLinear,
    pub middle: [BoundConv; 2],
    pub output: BoundConv,
}

/// Sinusoidal embedding of integer timesteps, `[n, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        data.extend(args.iter().map(|a| a.sin()));
        data.extend(args.iter().map(|a| a.cos()));
    }
    Tensor::new(vec![ts.len(), dim], data).expect("sized")
}

impl DenoiserParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lc = config.latent_dims()[0];
        let h = config.denoiser_hidden;
        let mut output = Conv::init(h, lc, 3, 1, 1, 1.0, &mut rng);
        output.weight.data_mut().iter_mut().for_each(|w| *w *= 0.1);
        Ok(DenoiserParams {
            config,
            input: Conv::init(2 * lc, h, 3, 1, 1, 1.4, &mut rng),
            time: Linear::init(config.time_embed, h, 1.0, &mut rng),
            middle: [Conv::init(h, h, 3, 1, 1, 1.4, &mut rng), Conv::init(h, h, 3, 1, 1, 1.4, &mut rng)],
            output,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDenoiser {
        BoundDenoiser {
            config: self.config,
            input: self.input.bind(tape, trainable),
            time: self.time.bind(tape, trainable),
            middle: self.middle.each_ref().map(|c| c.bind(tape, trainable)),
            output: self.output.bind(tape, trainable),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.input.tensors().into();
        v.extend(self.time.tensors());
        v.extend(self.middle.iter().flat_map(|c| c.tensors()));
        v.extend(self.output.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.input.tensors_mut().into();
        v.extend(self.time.tensors_mut());
        v.extend(self.middle.iter_mut().flat_map(|c| c.tensors_mut()));
        v.extend(self.output.tensors_mut());
        v
    }

    /// Value-level noise estimate for one latent clip.
    pub fn denoise(&self, z_t: &Tensor, t: usize, z_cond: &Tensor) -> Result<Tensor> {
        let dims = self.config.latent_dims();
        check_shape("denoise", z_t.shape(), &dims)?;
        check_shape("denoise", z_cond.shape(), &dims)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zt = tape.constant(z_t.clone().reshaped(&self.config.latent_batched(1))?);
        let zc = tape.constant(z_cond.clone().reshaped(&self.config.latent_batched(1))?);
        let out = bound.predict(&mut tape, zt, &[t], zc)?;
        tape.value(out).clone().reshaped(&dims)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let c = &self.config;
        let mut out = vec![meta(&[c.latent_channels, c.latent_frames, c.clip.height, c.clip.width, c.denoiser_hidden, c.time_embed, c.timesteps])];
        out.extend(self.tensors().into_iter().cloned());
        out
    }

    pub fn from_tensors(tensors: Vec<Tensor>, config: ModelConfig) -> Result<Self> {
        let mut it = tensors.into_iter();
        let m = take_meta(&mut it, "denoiser", 7)?;
        let c = &config;
        if m != [c.latent_channels, c.latent_frames, c.clip.height, c.clip.width, c.denoiser_hidden, c.time_embed, c.timesteps] {
            return Err(Error::InvalidConfig(format!("denoiser file built for {m:?}")));
        }
        let mut p = DenoiserParams::init(config, 0)?;
        take_into(&mut it, p.tensors_mut(), "denoiser")?;
        Ok(p)
    }
}

impl BoundDenoiser {
    /// Noise estimate for a batch: `z_t`, `cond` are `[N, C, h, w]`, `ts` has one timestep per row.
    pub fn predict(&self, tape: &mut Tape, z_t: Var, ts: &[usize], cond: Var) -> Result<Var> {
        let max = self.config.timesteps;
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > max) {
            return Err(Error::TimestepOutOfRange { t, max });
        }
        let n = ts.len();
        let want = self.config.latent_batched(n);
        check_shape("denoise", tape.shape(z_t), &want)?;
        check_shape("denoise", tape.shape(cond), &want)?;
        let h_dim = self.config.denoiser_hidden;

        let x = tape.concat(&[z_t, cond], 1)?;
        let h = self.input.forward(tape, x)?;
        let emb = tape.constant(timestep_embedding(ts, self.config.time_embed));
        let e = self.time.forward(tape, emb)?;
        let e = tape.silu(e)?;
        let e = tape.reshape(e, &[n, h_dim, 1, 1])?;
        let h = tape.add(h, e)?;
        let mut h = tape.silu(h)?;
        for conv in &self.middle {
            let r = conv.forward(tape, h)?;
            let r = tape.silu(r)?;
            h = tape.add(h, r)?;
        }
        self.output.forward(tape, h)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.input.vars().into();
        v.extend(self.time.vars());
        v.extend(self.middle.iter().flat_map(|c| c.vars()));
        v.extend(self.output.vars());
        v
    }
}

// ---------------------------------------------------------------- features

/// Fixed random spatiotemporal feature extractor. Weights never change after `init`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetParams {
    config: ModelConfig,
    convs: [Conv; 3],
    gain: f64,
    checksum: u64,
}

/// Output multiplier. At the default feature weight of 0.002 it puts the
/// weighted feature term on the same order as the pixel term.
pub const FEATURE_GAIN: f64 = 200.0;

impl FeatureNetParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfea7_0000);
        let s = config.clip.frames;
        let d = config.feature_dim;
        let mut convs = [
            Conv::init(s, d / 4, 3, 2, 1, 1.7, &mut rng),
            Conv::init(d / 4, d / 2, 3, 2, 1, 1.7, &mut rng),
            Conv::init(d / 2, d, 3, 2, 1, 1.7, &mut rng),
        ];
        for c in &mut convs {
            let n = c.bias.len();
            c.bias = Tensor::uniform(&[n], -0.1, 0.1, &mut rng);
        }
        let mut p = FeatureNetParams { config, convs, gain: FEATURE_GAIN, checksum: 0 };
        p.checksum = checksum(p.tensors());
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.convs.iter().flat_map(|c| c.tensors()).collect()
    }

    /// True when the weights still hash to their initialisation checksum.
    pub fn is_intact(&self) -> bool {
        checksum(self.tensors()) == self.checksum
    }

    /// `[N, S, H, W] -> [N, d_f]`, differentiable w.r.t. the input.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = self.config.clip;
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1..] != [c.frames, c.height, c.width] {
            return Err(Error::shape("features", format!("expected [N, {}, {}, {}], got {s:?}", c.frames, c.height, c.width)));
        }
        let mut h = x;
        for conv in &self.convs {
            let w = tape.constant(conv.weight.clone());
            let b = tape.constant(conv.bias.clone());
            h = tape.conv2d(h, w, Some(b), conv.stride, conv.pad)?;
            h = tape.silu(h)?;
        }
        let pooled = tape.avg_pool(h, c.height / DOWNSAMPLE)?;
        let flat = tape.reshape(pooled, &[s[0], self.config.feature_dim])?;
        tape.scale(flat, self.gain)
    }

    pub fn features(&self, x: &VideoClip) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.batched());
        let f = self.forward(&mut tape, xv)?;
        Ok(tape.value(f).data().to_vec())
    }
}

/// Everything needed to predict: frozen networks plus the noise schedule.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub autoencoder: Arc<AutoencoderParams>,
    pub denoiser: Arc<DenoiserParams>,
    pub features: Arc<FeatureNetParams>,
}

impl ModelBundle {
    pub fn config(&self) -> ModelConfig {
        self.autoencoder.config
    }
}

/// Draw a latent-shaped standard normal tensor.
pub fn latent_noise<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Tensor {
    Tensor::randn(&config.latent_dims(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::{central_difference, relative_error};

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    fn random_clip(seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::new(Tensor::uniform(&cfg().clip.dims(), 0.0, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let ae = AutoencoderParams::init(cfg(), 1).unwrap();
        let zero = VideoClip::new(Tensor::zeros(&cfg().clip.dims())).unwrap();
        let a = ae.encode(&zero).unwrap();
        let b = ae.encode(&zero).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &cfg().latent_dims());
        let back = ae.decode(&a).unwrap();
        assert_eq!(back.shape(), cfg().clip);
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let ae = AutoencoderParams::init(cfg(), 1).unwrap();
        let small = VideoClip::new(Tensor::zeros(&[4, 16, 16])).unwrap();
        assert!(matches!(ae.encode(&small), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(ae.decode(&Tensor::zeros(&[8, 2, 2])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn decode_stays_in_unit_range() {
        let ae = AutoencoderParams::init(cfg(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let z = Tensor::randn(&cfg().latent_dims(), &mut rng).map(|v| 5.0 * v);
            let x = ae.decode(&z).unwrap();
            assert!(x.pixels().data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(x.pixels().bit_eq(ae.decode(&z).unwrap().pixels()));
        }
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        let ae = AutoencoderParams::init(cfg(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z0 = Tensor::randn(&cfg().latent_batched(1), &mut rng);
        let mut tape = Tape::new();
        let bound = ae.bind(&mut tape, false);
        let z = tape.param(z0.clone());
        let x = bound.decode(&mut tape, z).unwrap();
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap().take(z).unwrap();
        let fd = central_difference(
            |zz| {
                let mut t = Tape::new();
                let b = ae.bind(&mut t, false);
                let zv = t.constant(zz.clone());
                let x = b.decode(&mut t, zv)?;
                Ok(t.value(x).sum())
            },
            &z0,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&g, &fd) <= 1e-5, "{}", relative_error(&g, &fd));
    }

    #[test]
    fn denoiser_contract() {
        let d = DenoiserParams::init(cfg(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let zt = latent_noise(&cfg(), &mut rng);
        let zc = latent_noise(&cfg(), &mut rng);
        let a = d.denoise(&zt, 10, &zc).unwrap();
        let b = d.denoise(&zt, 10, &zc).unwrap();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &cfg().latent_dims());
        assert!(matches!(d.denoise(&zt, cfg().timesteps + 1, &zc), Err(Error::TimestepOutOfRange { .. })));
        assert!(matches!(d.denoise(&zt, 0, &zc), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn denoiser_gradient_matches_finite_differences() {
        let mut d = DenoiserParams::init(cfg(), 7).unwrap();
        // Give the zero-ish output layer real weights so the check is not trivial.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        d.output = Conv::init(cfg().denoiser_hidden, cfg().latent_dims()[0], 3, 1, 1, 1.0, &mut rng);
        let zt0 = Tensor::randn(&cfg().latent_batched(1), &mut rng);
        let zc = Tensor::randn(&cfg().latent_batched(1), &mut rng);
        let weights = Tensor::randn(&cfg().latent_batched(1), &mut rng);
        let run = |t: &mut Tape, zt: Var| -> Result<Var> {
            let b = d.bind(t, false);
            let c = t.constant(zc.clone());
            let w = t.constant(weights.clone());
            let out = b.predict(t, zt, &[37], c)?;
            let prod = t.mul(out, w)?;
            t.sum(prod)
        };
        let mut tape = Tape::new();
        let zt = tape.param(zt0.clone());
        let l = run(&mut tape, zt).unwrap();
        let g = tape.backward(l).unwrap().take(zt).unwrap();
        let fd = central_difference(
            |x| {
                let mut t = Tape::new();
                let v = t.constant(x.clone());
                let l = run(&mut t, v)?;
                Ok(t.value(l).data()[0])
            },
            &zt0,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&g, &fd) <= 1e-5, "{}", relative_error(&g, &fd));
    }

    #[test]
    fn features_are_frozen_and_discriminative() {
        let f = FeatureNetParams::init(cfg(), 0).unwrap();
        assert!(f.is_intact());
        let x = random_clip(1);
        assert_eq!(f.features(&x).unwrap(), f.features(&x).unwrap());
        assert_eq!(f.features(&x).unwrap().len(), f.dim());
        for i in 0..100 {
            let a = f.features(&random_clip(1000 + 2 * i)).unwrap();
            let b = f.features(&random_clip(1001 + 2 * i)).unwrap();
            let d: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn features_gradient_matches_finite_differences() {
        let f = FeatureNetParams::init(cfg(), 0).unwrap();
        let x0 = random_clip(2).batched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[1, cfg().feature_dim], &mut rng);
        let run = |t: &mut Tape, x: Var| -> Result<Var> {
            let out = f.forward(t, x)?;
            let wv = t.constant(w.clone());
            let p = t.mul(out, wv)?;
            t.sum(p)
        };
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let l = run(&mut tape, x).unwrap();
        let g = tape.backward(l).unwrap().take(x).unwrap();
        let fd = central_difference(
            |xx| {
                let mut t = Tape::new();
                let v = t.constant(xx.clone());
                let l = run(&mut t, v)?;
                Ok(t.value(l).data()[0])
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(&g, &fd) <= 1e-5, "{}", relative_error(&g, &fd));
    }

    #[test]
    fn params_round_trip_through_tensors() {
        let ae = AutoencoderParams::init(cfg(), 11).unwrap();
        let back = AutoencoderParams::from_tensors(ae.to_tensors(), cfg()).unwrap();
        assert_eq!(ae, back);
        let d = DenoiserParams::init(cfg(), 12).unwrap();
        let back = DenoiserParams::from_tensors(d.to_tensors(), cfg()).unwrap();
        assert_eq!(d, back);
        let other = ModelConfig { denoiser_hidden: 8, ..cfg() };
        assert!(DenoiserParams::from_tensors(d.to_tensors(), other).is_err());
    }
}
