//! Bilinear sampling primitives shared by the warp, crop and upsample ops.

/// Bilinear read of `plane[h x w]` at fractional `(y, x)`; out-of-bounds taps
/// contribute zero.
#[inline]
pub fn bilerp_zero(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> f32 {
    let y0f = y.floor();
    let x0f = x.floor();
    let dy = y - y0f;
    let dx = x - x0f;
    let y0 = y0f as i64;
    let x0 = x0f as i64;
    let mut acc = 0.0f32;
    let taps = [
        (y0, x0, (1.0 - dy) * (1.0 - dx)),
        (y0, x0 + 1, (1.0 - dy) * dx),
        (y0 + 1, x0, dy * (1.0 - dx)),
        (y0 + 1, x0 + 1, dy * dx),
    ];
    for (yy, xx, wt) in taps {
        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
            acc += wt * plane[yy as usize * w + xx as usize];
        }
    }
    acc
}

/// Value plus partial derivatives w.r.t. the sample coordinates.
#[inline]
pub fn bilerp_zero_with_grad(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> (f32, f32, f32) {
    let y0f = y.floor();
    let x0f = x.floor();
    let dy = y - y0f;
    let dx = x - x0f;
    let y0 = y0f as i64;
    let x0 = x0f as i64;
    let read = |yy: i64, xx: i64| -> f32 {
        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
            plane[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    let p00 = read(y0, x0);
    let p01 = read(y0, x0 + 1);
    let p10 = read(y0 + 1, x0);
    let p11 = read(y0 + 1, x0 + 1);
    let v = (1.0 - dy) * ((1.0 - dx) * p00 + dx * p01) + dy * ((1.0 - dx) * p10 + dx * p11);
    let d_dy = ((1.0 - dx) * p10 + dx * p11) - ((1.0 - dx) * p00 + dx * p01);
    let d_dx = ((1.0 - dy) * p01 + dy * p11) - ((1.0 - dy) * p00 + dy * p10);
    (v, d_dy, d_dx)
}

/// Scatter `g` through the bilinear taps at `(y, x)` into `dplane`.
#[inline]
pub fn bilerp_zero_scatter(dplane: &mut [f32], h: usize, w: usize, y: f32, x: f32, g: f32) {
    let y0f = y.floor();
    let x0f = x.floor();
    let dy = y - y0f;
    let dx = x - x0f;
    let y0 = y0f as i64;
    let x0 = x0f as i64;
    let taps = [
        (y0, x0, (1.0 - dy) * (1.0 - dx)),
        (y0, x0 + 1, (1.0 - dy) * dx),
        (y0 + 1, x0, dy * (1.0 - dx)),
        (y0 + 1, x0 + 1, dy * dx),
    ];
    for (yy, xx, wt) in taps {
        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
            dplane[yy as usize * w + xx as usize] += wt * g;
        }
    }
}

/// Source coordinate and clamped corner pair for a bilinear resize with edge
/// replication (`align_corners = false` convention).
#[inline]
pub fn resize_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f32) {
    let scale = src_len as f32 / dst_len as f32;
    let s = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f32);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_coords_read_exact() {
        let p = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilerp_zero(&p, 2, 2, 0.0, 1.0), 2.0);
        assert_eq!(bilerp_zero(&p, 2, 2, 1.0, 0.0), 3.0);
    }

    #[test]
    fn outside_reads_zero() {
        let p = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilerp_zero(&p, 2, 2, -2.0, 0.0), 0.0);
        assert_eq!(bilerp_zero(&p, 2, 2, 0.0, 5.0), 0.0);
    }

    #[test]
    fn fractional_matches_hand_formula() {
        let p = [0.0, 1.0, 2.0, 3.0];
        // (0.5, 0.5) averages all four corners.
        assert!((bilerp_zero(&p, 2, 2, 0.5, 0.5) - 1.5).abs() < 1e-6);
        let (v, gy, gx) = bilerp_zero_with_grad(&p, 2, 2, 0.25, 0.75);
        let want = 0.75 * (0.25 * 0.0 + 0.75 * 1.0) + 0.25 * (0.25 * 2.0 + 0.75 * 3.0);
        assert!((v - want).abs() < 1e-6);
        // Finite-difference agreement on the coordinate grads.
        let e = 1e-3;
        let fy = (bilerp_zero(&p, 2, 2, 0.25 + e, 0.75) - bilerp_zero(&p, 2, 2, 0.25 - e, 0.75))
            / (2.0 * e);
        let fx = (bilerp_zero(&p, 2, 2, 0.25, 0.75 + e) - bilerp_zero(&p, 2, 2, 0.25, 0.75 - e))
            / (2.0 * e);
        assert!((gy - fy).abs() < 1e-3);
        assert!((gx - fx).abs() < 1e-3);
    }
}
