//! Adaptive-moment (Adam) updates with bias correction.

use crate::diffcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros_like(t: &Tensor) -> Self {
        Moments { m: Tensor::zeros(t.shape()), v: Tensor::zeros(t.shape()) }
    }
}

/// One update of `param` in place. `step` is the 1-based count including this update.
pub fn adam_update(param: &mut Tensor, grad: &Tensor, moments: &mut Moments, step: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let p = param.data_mut();
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for i in 0..p.len() {
        let g = grad.data()[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Moments for a whole parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub moments: Vec<Moments>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        AdamState { moments: params.into_iter().map(Moments::zeros_like).collect(), step: 0 }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], cfg: &AdamConfig) {
        assert_eq!(params.len(), self.moments.len());
        self.step += 1;
        for ((p, g), mom) in params.into_iter().zip(grads).zip(&mut self.moments) {
            adam_update(p, g, mom, self.step, cfg);
        }
    }
}

/// Rescale so the joint L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
