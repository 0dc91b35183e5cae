//! Dense kernels shared by training and inference. Both sides call the same
//! functions for full-precision layers, batch norm and output scaling, so a
//! top-level training forward and an integer inference forward agree bit for
//! bit.

use crate::model::ConvGeom;

pub const BN_EPS: f64 = 1e-5;

/// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// `a_t`/`b_t` read the operand transposed from row-major storage.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfold one `[c, h, w]` sample into `[c·kh·kw, oh·ow]` columns.
pub fn im2col<T: Copy + Default>(x: &[T], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize) -> Vec<T> {
    let taps = g.in_ch * g.kh * g.kw;
    let p = oh * ow;
    let mut cols = vec![T::default(); taps * p];
    for ci in 0..g.in_ch {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c, h, w]` sample.
pub fn col2im(cols: &[f64], h: usize, w: usize, g: &ConvGeom, oh: usize, ow: usize) -> Vec<f64> {
    let p = oh * ow;
    let mut x = vec![0.0; g.in_ch * h * w];
    for ci in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ci * h * w + iy as usize * w..][..w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Full-precision convolution of one sample, optional per-channel bias.
pub fn conv_sample(x: &[f64], h: usize, w: usize, g: &ConvGeom, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (oh, ow) = g.out_hw(h, w).expect("geometry checked by caller");
    let cols = im2col(x, h, w, g, oh, ow);
    conv_cols(&cols, g, oh * ow, weight, bias)
}

/// `weight · cols (+ bias)` for precomputed columns.
pub fn conv_cols(cols: &[f64], g: &ConvGeom, p: usize, weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let taps = g.in_ch * g.kh * g.kw;
    let mut y = vec![0.0; g.out_ch * p];
    if let Some(b) = bias {
        for (o, chunk) in y.chunks_mut(p.max(1)).enumerate().take(g.out_ch) {
            chunk.fill(b[o]);
        }
        gemm(g.out_ch, taps, p, weight, false, cols, false, 1.0, &mut y);
    } else {
        gemm(g.out_ch, taps, p, weight, false, cols, false, 0.0, &mut y);
    }
    y
}

/// `(acc + z·S(ā)) · s_w · s_a`, the dequantized output of an integer
/// convolution with compensation folded in.
#[inline]
pub fn scale_output(acc: f64, z: f64, act_sum: f64, s_w: f64, s_a: f64) -> f64 {
    (acc + z * act_sum) * s_w * s_a
}

/// Channel-wise inference batch norm on one `[c, h·w]` sample, in place.
pub fn bn_eval(x: &mut [f64], hw: usize, mean: &[f64], var: &[f64], scale: &[f64], shift: &[f64]) {
    for (c, chunk) in x.chunks_mut(hw.max(1)).enumerate().take(mean.len()) {
        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
        for v in chunk {
            *v = (*v - mean[c]) * inv * scale[c] + shift[c];
        }
    }
}

/// Non-overlapping `size×size` max pooling of one `[c, h, w]` sample. Returns
/// the pooled values and the flat index of each chosen input (first maximum
/// wins).
pub fn max_pool(x: &[f64], c: usize, h: usize, w: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut bv = f64::NEG_INFINITY;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = ci * h * w + (oy * size + dy) * w + ox * size + dx;
                        if best == usize::MAX || x[i] > bv {
                            best = i;
                            bv = x[i];
                        }
                    }
                }
                out.push(bv);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[inline]
pub fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], h: usize, w: usize, g: &ConvGeom, wt: &[f64]) -> Vec<f64> {
        let (oh, ow) = g.out_hw(h, w).unwrap();
        let mut y = vec![0.0; g.out_ch * oh * ow];
        for o in 0..g.out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..g.in_ch {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += wt[((o * g.in_ch + ci) * g.kh + ki) * g.kw + kj]
                                        * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let g = ConvGeom { in_ch: 2, out_ch: 3, kh: 3, kw: 2, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..g.weight_len()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        assert_eq!(conv_sample(&x, 5, 6, &g, &wt, None), naive_conv(&x, 5, 6, &g, &wt));
    }

    #[test]
    fn col2im_is_adjoint() {
        let g = ConvGeom { in_ch: 2, out_ch: 1, kh: 3, kw: 3, stride: 1, pad: 1 };
        let x: Vec<f64> = (0..2 * 4 * 4).map(|i| i as f64 * 0.5).collect();
        let cols = im2col(&x, 4, 4, &g, 4, 4);
        let r: Vec<f64> = (0..cols.len()).map(|i| (i % 7) as f64).collect();
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let back = col2im(&r, 4, 4, &g, 4, 4);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn bn_scalar() {
        let mut x = vec![2.0];
        bn_eval(&mut x, 1, &[1.0], &[1.0], &[2.0], &[1.0]);
        assert!((x[0] - 3.0).abs() < 1e-4);
    }
}
