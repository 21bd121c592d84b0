//! Brute-force reference implementations of the metrics, written without
//! sharing code or evaluation order with the library.

#![allow(dead_code)]

use nalgebra::DMatrix;
use noiseadapt::data::VideoClip;
use noiseadapt::diffcore::Tensor;
use noiseadapt::metrics::GaussianStats;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// SSIM with a direct 2-D Gaussian window and centred second moments.
pub fn ssim_oracle(x: &VideoClip, y: &VideoClip) -> f64 {
    let s = x.shape();
    let (k, sigma) = (11usize, 1.5f64);
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let half = (k / 2) as f64;
    let mut w = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            w[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= norm);

    let mut frame_sum = 0.0;
    for f in 0..s.frames {
        let (a, b) = (x.frame(f), y.frame(f));
        let mut acc = 0.0;
        let mut count = 0usize;
        for top in 0..=s.height - k {
            for left in 0..=s.width - k {
                let at = |p: &[f64], i: usize, j: usize| p[(top + i) * s.width + left + j];
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        ma += w[i * k + j] * at(a, i, j);
                        mb += w[i * k + j] * at(b, i, j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let (da, db) = (at(a, i, j) - ma, at(b, i, j) - mb);
                        va += w[i * k + j] * da * da;
                        vb += w[i * k + j] * db * db;
                        cov += w[i * k + j] * da * db;
                    }
                }
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        frame_sum += acc / count as f64;
    }
    frame_sum / s.frames as f64
}

/// PSNR via the natural log; identical clips map to the 100 dB cap.
pub fn psnr_oracle(x: &VideoClip, y: &VideoClip, max_val: f64) -> f64 {
    let (a, b) = (x.pixels().data(), y.pixels().data());
    let mut sse = 0.0;
    for i in 0..a.len() {
        sse += (a[i] - b[i]).powi(2);
    }
    if sse == 0.0 {
        return 100.0;
    }
    let mse = sse / a.len() as f64;
    (10.0 * (max_val.powi(2) / mse).ln() / std::f64::consts::LN_10).min(100.0)
}

pub fn boundary_oracle(cond: &VideoClip, pred: &VideoClip) -> f64 {
    let s = cond.shape();
    let (c, p) = (cond.pixels().data(), pred.pixels().data());
    let base = (s.frames - 1) * s.height * s.width;
    let mut total = 0.0;
    for y in 0..s.height {
        for x in 0..s.width {
            total += (c[base + y * s.width + x] - p[y * s.width + x]).abs();
        }
    }
    total / (s.height * s.width) as f64
}

/// Fréchet distance with the root trace taken from the eigenvalues of the
/// non-symmetric product `S_a S_b` (real Schur form).
pub fn frechet_oracle(a: &GaussianStats, b: &GaussianStats) -> f64 {
    let n = a.mean.len();
    let sa = DMatrix::from_row_slice(n, n, &a.cov);
    let sb = DMatrix::from_row_slice(n, n, &b.cov);
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let eig = (&sa * &sb).complex_eigenvalues();
    let root: f64 = eig.iter().map(|l| l.re.max(0.0).sqrt()).sum();
    mean + sa.trace() + sb.trace() - 2.0 * root
}

/// Sample mean and unbiased covariance, summed in column order.
pub fn fit_oracle(rows: &[Vec<f64>]) -> GaussianStats {
    let (n, d) = (rows.len(), rows[0].len());
    let m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = m.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    GaussianStats { mean: mean.iter().copied().collect(), cov: cov.transpose().as_slice().to_vec(), count: n }
}

pub fn random_clip(r: &mut ChaCha8Rng, frames: usize, h: usize, w: usize) -> VideoClip {
    VideoClip::new(Tensor::uniform(&[frames, h, w], 0.0, 1.0, r)).unwrap()
}

/// A clip near `x`: `x` plus uniform noise of amplitude `amp`, clamped to [0, 1].
pub fn perturbed(x: &VideoClip, amp: f64, r: &mut ChaCha8Rng) -> VideoClip {
    let data = x.pixels().data().iter().map(|v| (v + amp * (r.random::<f64>() * 2.0 - 1.0)).clamp(0.0, 1.0)).collect();
    VideoClip::new(Tensor::new(x.pixels().shape().to_vec(), data).unwrap()).unwrap()
}

/// Random well-conditioned feature sample of `n` rows in `d` dimensions.
pub fn random_features(r: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let mix: Vec<f64> = (0..d * d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
            (0..d).map(|i| shift + z[i] + 0.5 * (0..d).map(|j| mix[i * d + j] * z[j]).sum::<f64>()).collect()
        })
        .collect()
}
