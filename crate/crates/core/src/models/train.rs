use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutoencoderParams, ModelConfig};
use crate::data::VideoClip;
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig { epochs: 12, lr: 3e-3, batch: 8, seed: 0 }
    }
}

/// Per-iteration training losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the first and last tenth of the curve.
    pub fn first_last_decile(&self) -> Option<(f64, f64)> {
        let n = self.losses.len() / 10;
        if n == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.losses[..n]), mean(&self.losses[self.losses.len() - n..])))
    }
}

fn stack(clips: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![clips.len()];
    shape.extend_from_slice(clips[0].shape());
    let data = clips.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Mean absolute reconstruction error of `decode(encode(x))` over `clips`.
pub fn reconstruction_l1(ae: &AutoencoderParams, clips: &[VideoClip]) -> Result<f64> {
    let mut total = 0.0;
    for c in clips {
        let rec = ae.decode(&ae.encode(c)?)?;
        let d = rec.pixels().data().iter().zip(c.pixels().data()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        total += d / c.pixels().len() as f64;
    }
    Ok(total / clips.len().max(1) as f64)
}

/// L1 reconstruction training with Adam. Afterwards the latent scale is set so
/// encoded training clips have unit standard deviation.
pub fn train_autoencoder(
    clips: &[VideoClip],
    config: ModelConfig,
    train: &AeTrainConfig,
) -> Result<(AutoencoderParams, TrainReport)> {
    let mut params = AutoencoderParams::init(config, train.seed)?;
    let mut report = TrainReport::default();
    if train.epochs == 0 {
        return Ok((params, report));
    }
    if clips.is_empty() || train.batch == 0 {
        return Err(Error::InvalidConfig("autoencoder training needs clips and a positive batch".into()));
    }
    for c in clips {
        super::check_shape("train_autoencoder", &c.shape().dims(), &config.clip.dims())?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed.wrapping_add(1));
    let adam = AdamConfig { lr: train.lr, ..AdamConfig::default() };
    let mut state = AdamState::new(params.tensors());
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut iteration = 0;
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch) {
            let batch = stack(&chunk.iter().map(|&i| clips[i].pixels()).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let x = tape.constant(batch);
            let diverged = |_| Error::DivergedTraining { iteration };
            let z = bound.encode(&mut tape, x).map_err(diverged)?;
            let rec = bound.decode(&mut tape, z).map_err(diverged)?;
            let diff = tape.sub(rec, x)?;
            let a = tape.abs(diff)?;
            let loss = tape.mean(a)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::DivergedTraining { iteration });
            }
            report.losses.push(value);
            let vars = bound.vars();
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v).expect("trainable")).collect();
            state.update(params.tensors_mut(), &g, &adam);
            iteration += 1;
        }
    }
    params.latent_scale = 1.0;
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut n = 0.0;
    for c in clips {
        for v in params.encode(c)?.data() {
            sum += v;
            sq += v * v;
            n += 1.0;
        }
    }
    let var = sq / n - (sum / n).powi(2);
    if var > 0.0 && var.is_finite() {
        params.latent_scale = 1.0 / var.sqrt();
    }
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_stream, StreamSpec};

    fn clips(n: usize, seed: u64) -> Vec<VideoClip> {
        generate_stream(&StreamSpec { length: n, seed, drift: vec![], ..StreamSpec::default() }).unwrap()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let train = AeTrainConfig { epochs: 0, ..AeTrainConfig::default() };
        let (p, report) = train_autoencoder(&clips(4, 1), ModelConfig::default(), &train).unwrap();
        assert_eq!(p, AutoencoderParams::init(ModelConfig::default(), train.seed).unwrap());
        assert!(report.losses.is_empty());
    }

    #[test]
    fn short_training_reduces_loss_and_is_deterministic() {
        let data = clips(16, 2);
        let train = AeTrainConfig { epochs: 3, ..AeTrainConfig::default() };
        let (a, ra) = train_autoencoder(&data, ModelConfig::default(), &train).unwrap();
        let (b, _) = train_autoencoder(&data, ModelConfig::default(), &train).unwrap();
        assert_eq!(a, b);
        assert!(ra.losses.last().unwrap() < ra.losses.first().unwrap());
        let enc = a.encode(&data[0]).unwrap();
        assert!(enc.is_finite());
    }
}
