//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use super::Tensor;
use crate::error::Result;

/// Gradient of `f` at `x` by central differences with the given step.
pub fn central_difference<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// `|a - b|_2 / max(|a|_2, |b|_2)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
