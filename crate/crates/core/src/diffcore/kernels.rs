//! Raw forward and vector-Jacobian kernels over flat buffers.
//!
//! Layouts are NCHW for images and OIHW for convolution weights.

/// Output positions `o` for which `o * stride + k - pad` lands inside `0..in_len`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= in_len - 1
    let lim = in_len + pad;
    let hi = if k >= lim { 0 } else { ((lim - 1 - k) / stride + 1).min(out_len) };
    (lo.min(hi), hi)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if input.len() != 4 || weight.len() != 4 || input[1] != weight[1] || stride == 0 {
            return None;
        }
        let (h, w, kh, kw) = (input[2], input[3], weight[2], weight[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            n: input[0],
            c_in: input[1],
            h,
            w,
            c_out: weight[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.c_out * plane_out];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let dst = &mut out[(n * g.c_out + o) * plane_out..][..plane_out];
            if let Some(b) = bias {
                dst.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..g.c_in {
                let src = &input[(n * g.c_in + c) * plane_in..][..plane_in];
                let wk = &weight[(o * g.c_in + c) * g.kh * g.kw..][..g.kh * g.kw];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_in = &src[iy * g.w..][..g.w];
                            let row_out = &mut dst[oy * g.ow..][..g.ow];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                for (d, s) in row_out[ox0..ox1].iter_mut().zip(&row_in[ix0..]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gin = vec![0.0; g.n * g.c_in * plane_in];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + o) * plane_out..][..plane_out];
            for c in 0..g.c_in {
                let dst = &mut gin[(n * g.c_in + c) * plane_in..][..plane_in];
                let wk = &weight[(o * g.c_in + c) * g.kh * g.kw..][..g.kh * g.kw];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = wk[ky * g.kw + kx];
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_go = &go[oy * g.ow..][..g.ow];
                            let row_in = &mut dst[iy * g.w..][..g.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                for (d, s) in row_in[ix0..].iter_mut().zip(&row_go[ox0..ox1]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    row_in[ox * g.stride + kx - g.pad] += wv * row_go[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn conv2d_grad_weight(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut gw = vec![0.0; g.c_out * g.c_in * g.kh * g.kw];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let go = &grad_out[(n * g.c_out + o) * plane_out..][..plane_out];
            for c in 0..g.c_in {
                let src = &input[(n * g.c_in + c) * plane_in..][..plane_in];
                let dst = &mut gw[(o * g.c_in + c) * g.kh * g.kw..][..g.kh * g.kw];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_range(ky, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = valid_range(kx, g.pad, g.stride, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_in = &src[iy * g.w..][..g.w];
                            let row_go = &go[oy * g.ow..][..g.ow];
                            for ox in ox0..ox1 {
                                acc += row_go[ox] * row_in[ox * g.stride + kx - g.pad];
                            }
                        }
                        dst[ky * g.kw + kx] += acc;
                    }
                }
            }
        }
    }
    gw
}

pub(crate) fn conv2d_grad_bias(g: &ConvGeom, grad_out: &[f64]) -> Vec<f64> {
    let plane_out = g.oh * g.ow;
    let mut gb = vec![0.0; g.c_out];
    for n in 0..g.n {
        for (o, b) in gb.iter_mut().enumerate() {
            *b += grad_out[(n * g.c_out + o) * plane_out..][..plane_out].iter().sum::<f64>();
        }
    }
    gb
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T` for an `m x n` buffer.
pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Non-overlapping average pooling over the two trailing axes.
pub(crate) fn avg_pool_forward(input: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut gin = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut gin[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[oy * ow + ox] * scale;
                for dy in 0..k {
                    for dx in 0..k {
                        dst[(oy * k + dy) * w + ox * k + dx] = g;
                    }
                }
            }
        }
    }
    gin
}

/// Nearest-neighbour upsampling over the two trailing axes.
pub(crate) fn upsample_forward(input: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / f) * w..][..w];
            for (ox, d) in dst[oy * ow..][..ow].iter_mut().enumerate() {
                *d = row[ox / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(grad_out: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (oh, ow) = (h * f, w * f);
    let mut gin = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * oh * ow..][..oh * ow];
        let dst = &mut gin[p * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / f) * w + ox / f] += go[oy * ow + ox];
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_conv(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.n * g.c_out * g.oh * g.ow];
        for n in 0..g.n {
            for o in 0..g.c_out {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = 0.0;
                        for c in 0..g.c_in {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += weight[((o * g.c_in + c) * g.kh + ky) * g.kw + kx]
                                        * input[((n * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                        out[((n * g.c_out + o) * g.oh + oy) * g.ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_brute_force_over_geometries() {
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for &(h, w, k, stride, pad) in &[(5, 5, 3, 1, 1), (8, 6, 3, 2, 1), (7, 7, 3, 2, 0), (4, 4, 1, 1, 0), (9, 9, 4, 3, 2)] {
            let g = ConvGeom::new(&[2, 3, h, w], &[4, 3, k, k], stride, pad).unwrap();
            let input: Vec<f64> = (0..2 * 3 * h * w).map(|_| next()).collect();
            let weight: Vec<f64> = (0..4 * 3 * k * k).map(|_| next()).collect();
            let fast = conv2d_forward(&g, &input, &weight, None);
            let slow = brute_conv(&g, &input, &weight);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(0, 1, 1, 4, 4), (1, 4));
        assert_eq!(valid_range(2, 1, 1, 4, 4), (0, 3));
        assert_eq!(valid_range(0, 1, 2, 8, 4), (1, 4));
    }
}
