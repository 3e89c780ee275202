//! Slice-level numeric kernels shared by the tape and the cached decoder.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`. With `ta` set, `a` is stored
/// as `k x m`; likewise `tb` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m*k, k*n and m*n buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Layer normalisation of a single row; returns `(mean, 1/std)`.
pub fn layer_norm_row(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    out: &mut [f64],
) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * rstd * gamma[j] + beta[j];
    }
    (mean, rstd)
}

/// Output extent of the fixed 3x3 / padding-1 convolution.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    (len + 2 - 3) / stride + 1
}

/// Unfolds `[c, h, w]` into `[c*9, oh*ow]` columns for a 3x3, padding-1 kernel.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, sh: usize, sw: usize) -> Vec<f64> {
    let oh = conv_out_len(h, sh);
    let ow = conv_out_len(w, sw);
    let mut cols = vec![0.0; c * 9 * oh * ow];
    for ci in 0..c {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = (ci * 9 + kh * 3 + kw) * oh * ow;
                for y in 0..oh {
                    let iy = (y * sh + kh) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + iy as usize * w;
                    for xo in 0..ow {
                        let ix = (xo * sw + kw) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            cols[row + y * ow + xo] = x[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `[c, h, w]`.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, sh: usize, sw: usize, dx: &mut [f64]) {
    let oh = conv_out_len(h, sh);
    let ow = conv_out_len(w, sw);
    for ci in 0..c {
        for kh in 0..3 {
            for kw in 0..3 {
                let row = (ci * 9 + kh * 3 + kw) * oh * ow;
                for y in 0..oh {
                    let iy = (y * sh + kh) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + iy as usize * w;
                    for xo in 0..ow {
                        let ix = (xo * sw + kw) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dx[dst + ix as usize] += cols[row + y * ow + xo];
                        }
                    }
                }
            }
        }
    }
}

/// Fixed sinusoidal position encoding for positions `start..start+len`.
pub fn sinusoidal_positions(start: usize, len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for p in 0..len {
        let pos = (start + p) as f64;
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos / 10000f64.powf(2.0 * pair / d as f64);
            pe[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
