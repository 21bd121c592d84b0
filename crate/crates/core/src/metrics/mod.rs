//! Pairwise fidelity metrics and the feature-space Fréchet distance.
//!
//! All functions here are pure.

mod frechet;
mod ssim;

pub use frechet::{frechet_distance, gaussian_fit, psd_sqrt, symmetric_eigen, GaussianStats};
pub use ssim::{ssim, ssim_frame, C1, C2, SIGMA, WINDOW};

use crate::data::VideoClip;
use crate::error::{Error, Result};

/// Reported in place of +inf when the clips are identical.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr(x: &VideoClip, y: &VideoClip, max_val: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("psnr", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    if max_val <= 0.0 {
        return Err(Error::InvalidRange(format!("max_val {max_val}")));
    }
    let (a, b) = (x.pixels().data(), y.pixels().data());
    let mse = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP))
}

/// Mean absolute difference between the last frame of `cond` and the first frame of `pred`.
pub fn boundary_consistency(cond: &VideoClip, pred: &VideoClip) -> Result<f64> {
    let (sc, sp) = (cond.shape(), pred.shape());
    if (sc.height, sc.width) != (sp.height, sp.width) {
        return Err(Error::shape("boundary_consistency", format!("{sc:?} vs {sp:?}")));
    }
    let last = cond.frame(sc.frames - 1);
    let first = pred.frame(0);
    Ok(last.iter().zip(first).map(|(a, b)| (a - b).abs()).sum::<f64>() / last.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn clip(v: f64) -> VideoClip {
        VideoClip::new(Tensor::full(&[2, 16, 16], v)).unwrap()
    }

    #[test]
    fn psnr_cases() {
        assert_eq!(psnr(&clip(0.3), &clip(0.3), 1.0).unwrap(), PSNR_CAP);
        let v = psnr(&clip(0.0), &clip(0.1), 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9);
        assert!(psnr(&clip(0.0), &clip(0.1), 0.0).is_err());
    }

    #[test]
    fn ssim_identity_and_constant_frames() {
        let mut rng = rand::rng();
        let x = VideoClip::new(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng)).unwrap();
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let v = ssim(&clip(0.0), &clip(1.0)).unwrap();
        assert!((v - C1 / (1.0 + C1)).abs() < 1e-12, "{v}");
    }

    #[test]
    fn ssim_rejects_small_frames() {
        let a = VideoClip::new(Tensor::zeros(&[1, 8, 8])).unwrap();
        assert!(matches!(ssim(&a, &a), Err(Error::FrameTooSmall { .. })));
    }

    #[test]
    fn boundary_cases() {
        assert_eq!(boundary_consistency(&clip(0.2), &clip(0.2)).unwrap(), 0.0);
        assert!((boundary_consistency(&clip(0.2), &clip(0.7)).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_fit_pair_and_repeats() {
        let v = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        let g = gaussian_fit(&[v.clone(), neg]).unwrap();
        assert!(g.mean.iter().all(|m| m.abs() < 1e-15));
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.cov[i * 3 + j] - 2.0 * v[i] * v[j]).abs() < 1e-12);
            }
        }
        let same = gaussian_fit(&vec![v.clone(); 5]).unwrap();
        assert!(same.cov.iter().all(|c| *c == 0.0));
        assert!(matches!(gaussian_fit(&[v]), Err(Error::TooFewSamples(1))));
    }

    #[test]
    fn frechet_closed_forms() {
        let a = GaussianStats { mean: vec![0.0, 0.0], cov: vec![1.0, 0.0, 0.0, 1.0], count: 10 };
        let b = GaussianStats { mean: vec![3.0, 4.0], ..a.clone() };
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-8);
        assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-8);
        let wide = GaussianStats { mean: vec![0.0], cov: vec![4.0], count: 10 };
        let unit = GaussianStats { mean: vec![0.0], cov: vec![1.0], count: 10 };
        assert!((frechet_distance(&wide, &unit).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(frechet_distance(&a, &unit), Err(Error::DimensionMismatch(2, 1))));
    }
}
