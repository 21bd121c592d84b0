use crate::error::{Error, Result};

/// Mean and unbiased covariance of a set of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<GaussianStats> {
    if features.len() < 2 {
        return Err(Error::TooFewSamples(features.len()));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::DimensionMismatch(d, bad.len()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    let mut centred = vec![0.0; d];
    for f in features {
        for ((c, v), m) in centred.iter_mut().zip(f).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += centred[i] * centred[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1.0);
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianStats { mean, cov, count: features.len() })
}

/// Eigenvalues and eigenvectors (columns) of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok((vec![0.0; n], v));
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            let vals = (0..n).map(|i| m[i * n + i]).collect();
            return Ok((vals, v));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::EigenFailure)
}

/// Principal square root of a symmetric PSD matrix, negative eigenvalues clamped to zero.
pub fn psd_sqrt(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let sym = symmetrize(a, n);
    let (vals, vecs) = symmetric_eigen(&sym, n)?;
    let mut out = vec![0.0; n * n];
    for (k, &lam) in vals.iter().enumerate() {
        let r = lam.max(0.0).sqrt();
        if r == 0.0 {
            continue;
        }
        for i in 0..n {
            let vi = vecs[i * n + k] * r;
            for j in 0..n {
                out[i * n + j] += vi * vecs[j * n + k];
            }
        }
    }
    Ok(out)
}

fn symmetrize(a: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = 0.5 * (a[i * n + j] + a[j * n + i]);
        }
    }
    s
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of the root is taken from the symmetric form
/// `(S_a^(1/2) S_b S_a^(1/2))^(1/2)`, which shares its eigenvalues.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let n = a.dim();
    if b.dim() != n {
        return Err(Error::DimensionMismatch(n, b.dim()));
    }
    if a.cov.len() != n * n || b.cov.len() != n * n {
        return Err(Error::DimensionMismatch(n * n, a.cov.len().min(b.cov.len())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = psd_sqrt(&a.cov, n)?;
    let inner = symmetrize(&matmul(&matmul(&root_a, &b.cov, n), &root_a, n), n);
    let (vals, _) = symmetric_eigen(&inner, n)?;
    let tr_root: f64 = vals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let tr_a: f64 = (0..n).map(|i| a.cov[i * n + i]).sum();
    let tr_b: f64 = (0..n).map(|i| b.cov[i * n + i]).sum();
    Ok((mean_term + tr_a + tr_b - 2.0 * tr_root).max(0.0))
}
