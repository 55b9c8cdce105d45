//! Flat-buffer GEMM and im2col/col2im kernels behind the conv and dense ops.
//!
//! Single-threaded on purpose: training reproducibility requires a fixed
//! floating-point reduction order.

/// `c[m x n] += a[m x k] * b[k x n]`, all row-major.
///
/// Tiled over `n` so the active slice of `b` stays cache-resident across the
/// `m` loop even when `m` is small (the conv forward runs with `m` = filter
/// count and a wide `n`).
pub fn gemm_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    const TILE_N: usize = 256;
    let mut j0 = 0;
    while j0 < n {
        let jn = TILE_N.min(n - j0);
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j0 + jn];
            let arow = &a[i * k..i * k + k];
            let mut kk = 0;
            // 4-way unrolled rank-1 updates keep the inner loop vectorizable.
            while kk + 4 <= k {
                let a0 = arow[kk];
                let a1 = arow[kk + 1];
                let a2 = arow[kk + 2];
                let a3 = arow[kk + 3];
                let b0 = &b[kk * n + j0..kk * n + j0 + jn];
                let b1 = &b[(kk + 1) * n + j0..(kk + 1) * n + j0 + jn];
                let b2 = &b[(kk + 2) * n + j0..(kk + 2) * n + j0 + jn];
                let b3 = &b[(kk + 3) * n + j0..(kk + 3) * n + j0 + jn];
                for j in 0..jn {
                    crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                kk += 4;
            }
            while kk < k {
                let av = arow[kk];
                let brow = &b[kk * n + j0..kk * n + j0 + jn];
                for j in 0..jn {
                    crow[j] += av * brow[j];
                }
                kk += 1;
            }
        }
        j0 += jn;
    }
}

/// Transpose a row-major `[rows x cols]` matrix into `out` (`[cols x rows]`).
pub fn transpose(out: &mut [f32], a: &[f32], rows: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Output spatial size of a convolution: `floor((len + 2*pad - k) / stride) + 1`.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

/// Unfold one sample `x[c, h, w]` into `cols_t[c*k*k, oh*ow]` — tap-major,
/// pixel-minor — for a `k x k` kernel. Out-of-bounds taps read zero.
///
/// This orientation makes the conv forward a single `W[f, ckk] * cols_t`
/// GEMM writing the `[f, oh*ow]` output directly, and fills each tap row
/// with contiguous input-row copies for stride-1 convolutions.
#[allow(clippy::too_many_arguments)]
pub fn im2col_t(
    cols_t: &mut [f32],
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let ckk = c * k * k;
    debug_assert_eq!(cols_t.len(), ckk * oh * ow);
    cols_t.fill(0.0);
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst_row = ((ci * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let src_row = iy as usize * w;
                    if stride == 1 {
                        // ox valid where 0 <= ox + kx - pad < w.
                        let ox_lo = (pad as i64 - kx as i64).max(0) as usize;
                        let ox_hi =
                            ((w as i64 + pad as i64 - kx as i64).min(ow as i64)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix0 = ox_lo + kx - pad;
                        let dst = dst_row + oy * ow + ox_lo;
                        let span = ox_hi - ox_lo;
                        cols_t[dst..dst + span]
                            .copy_from_slice(&xc[src_row + ix0..src_row + ix0 + span]);
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix >= 0 && ix < w as i64 {
                                cols_t[dst_row + oy * ow + ox] = xc[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add `cols_t[c*k*k, oh*ow]` back into `dx[c, h, w]` (adjoint of
/// [`im2col_t`]).
#[allow(clippy::too_many_arguments)]
pub fn col2im_t_acc(
    dx: &mut [f32],
    cols_t: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_len(h, k, stride, pad);
    let ow = conv_out_len(w, k, stride, pad);
    let ckk = c * k * k;
    debug_assert_eq!(cols_t.len(), ckk * oh * ow);
    for ci in 0..c {
        let xc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src_row = ((ci * k + ky) * k + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    let dst_row = iy as usize * w;
                    if stride == 1 {
                        let ox_lo = (pad as i64 - kx as i64).max(0) as usize;
                        let ox_hi =
                            ((w as i64 + pad as i64 - kx as i64).min(ow as i64)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix0 = ox_lo + kx - pad;
                        let src = src_row + oy * ow + ox_lo;
                        let span = ox_hi - ox_lo;
                        let d = &mut xc[dst_row + ix0..dst_row + ix0 + span];
                        let s = &cols_t[src..src + span];
                        for i in 0..span {
                            d[i] += s[i];
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as i64 - pad as i64;
                            if ix >= 0 && ix < w as i64 {
                                xc[dst_row + ix as usize] += cols_t[src_row + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let m = 5;
        let k = 7;
        let n = 6;
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut c = vec![0.0f32; m * n];
        gemm_acc(&mut c, &a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut want = 0.0f32;
                for kk in 0..k {
                    want += a[i * k + kk] * b[kk * n + j];
                }
                assert!((c[i * n + j] - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col_t(x), y> == <x, col2im_t(y)> for random x, y, both strides.
        for (s, p) in [(1usize, 1usize), (2, 1)] {
            let (c, h, w, k) = (2, 5, 4, 3);
            let oh = conv_out_len(h, k, s, p);
            let ow = conv_out_len(w, k, s, p);
            let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.7).sin()).collect();
            let y: Vec<f32> = (0..oh * ow * c * k * k).map(|i| (i as f32 * 0.3).cos()).collect();
            let mut cols = vec![0.0; y.len()];
            im2col_t(&mut cols, &x, c, h, w, k, s, p);
            let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut dx = vec![0.0; x.len()];
            col2im_t_acc(&mut dx, &y, c, h, w, k, s, p);
            let rhs: f32 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
        }
    }
}
