mod common;

use common::*;
use noiseadapt::metrics::{boundary_consistency, frechet_distance, gaussian_fit, psnr, ssim, GaussianStats};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn pairwise_metrics_match_oracles() {
    let mut r = rng(1);
    for _ in 0..20 {
        let (f, h, w) = (r.random_range(1..4), r.random_range(11..20), r.random_range(11..20));
        let x = random_clip(&mut r, f, h, w);
        let y = perturbed(&x, r.random_range(0.0..0.5), &mut r);
        assert!((ssim(&x, &y).unwrap() - ssim_oracle(&x, &y)).abs() <= 1e-9);
        assert!((psnr(&x, &y, 1.0).unwrap() - psnr_oracle(&x, &y, 1.0)).abs() <= 1e-9);
        assert!((boundary_consistency(&x, &y).unwrap() - boundary_oracle(&x, &y)).abs() <= 1e-12);
    }
}

#[test]
fn frechet_matches_oracle() {
    let mut r = rng(2);
    for _ in 0..20 {
        let d = r.random_range(2..10);
        let a = gaussian_fit(&random_features(&mut r, d + 20, d, 0.0)).unwrap();
        let b = gaussian_fit(&random_features(&mut r, d + 30, d, 0.3)).unwrap();
        let (got, want) = (frechet_distance(&a, &b).unwrap(), frechet_oracle(&a, &b));
        assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
    }
}

#[test]
fn gaussian_fit_matches_oracle() {
    let rows = random_features(&mut rng(3), 40, 6, 0.5);
    let (a, b) = (gaussian_fit(&rows).unwrap(), fit_oracle(&rows));
    for (x, y) in a.mean.iter().zip(&b.mean).chain(a.cov.iter().zip(&b.cov)) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn frechet_closed_forms_with_general_covariance() {
    let mut r = rng(4);
    for _ in 0..10 {
        let d = r.random_range(2..10);
        let a = gaussian_fit(&random_features(&mut r, d + 20, d, 0.0)).unwrap();
        assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-8);
        let mu: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
        let shifted = GaussianStats { mean: a.mean.iter().zip(&mu).map(|(m, s)| m + s).collect(), ..a.clone() };
        let norm: f64 = mu.iter().map(|v| v * v).sum();
        assert!((frechet_distance(&a, &shifted).unwrap() - norm).abs() <= 1e-8);
    }
}

#[test]
fn psnr_decreases_with_noise_amplitude() {
    let mut r = rng(5);
    let x = random_clip(&mut r, 2, 16, 16);
    let noise: Vec<f64> = (0..x.pixels().data().len()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    let at = |amp: f64| {
        let data = x.pixels().data().iter().zip(&noise).map(|(v, n)| v + amp * n).collect();
        let y = noiseadapt::data::VideoClip::new(noiseadapt::diffcore::Tensor::new(vec![2, 16, 16], data).unwrap()).unwrap();
        psnr(&x, &y, 1.0).unwrap()
    };
    let v: Vec<f64> = [0.01, 0.05, 0.1].into_iter().map(at).collect();
    assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_is_symmetric_and_bounded(seed in any::<u64>(), amp in 0.0f64..1.0) {
        let mut r = rng(seed);
        let x = random_clip(&mut r, 2, 12, 13);
        let y = perturbed(&x, amp, &mut r);
        let (a, b) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        prop_assert_eq!(a, b);
        prop_assert!(a.abs() <= 1.0);
        prop_assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn frechet_is_symmetric(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = gaussian_fit(&random_features(&mut r, 12, 4, 0.0)).unwrap();
        let b = gaussian_fit(&random_features(&mut r, 15, 4, 1.0)).unwrap();
        let diff = frechet_distance(&a, &b).unwrap() - frechet_distance(&b, &a).unwrap();
        prop_assert!(diff.abs() <= 1e-8);
    }
}
