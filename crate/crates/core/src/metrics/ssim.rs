use crate::data::VideoClip;
use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable "valid" Gaussian filter of one plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&plane[y * w + x..]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all windows of one frame.
pub fn ssim_frame(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim", format!("frame buffers {} / {} for {h}x{w}", a.len(), b.len())));
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::FrameTooSmall { height: h, width: w, window: WINDOW });
    }
    let taps = gaussian_taps();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter(a, h, w, &taps);
    let mu_b = filter(b, h, w, &taps);
    let e_aa = filter(&aa, h, w, &taps);
    let e_bb = filter(&bb, h, w, &taps);
    let e_ab = filter(&ab, h, w, &taps);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
        let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Gaussian-windowed SSIM (11x11, sigma 1.5) per frame, averaged over frames.
pub fn ssim(x: &VideoClip, y: &VideoClip) -> Result<f64> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx != sy {
        return Err(Error::shape("ssim", format!("{sx:?} vs {sy:?}")));
    }
    let mut acc = 0.0;
    for f in 0..sx.frames {
        acc += ssim_frame(x.frame(f), y.frame(f), sx.height, sx.width)?;
    }
    Ok(acc / sx.frames as f64)
}
