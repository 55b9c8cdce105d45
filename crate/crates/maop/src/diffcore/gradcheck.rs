//! Central finite-difference gradient oracle for testing the tape.

use super::array::Array4;

/// Central-difference estimate of `d f / d x` for a scalar-valued `f`.
///
/// `eps` is scaled per coordinate by the input magnitude so that both large
/// and near-zero entries get a usable step.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Array4) -> f32, x: &Array4, eps: f32) -> Vec<f32> {
    let mut grad = vec![0.0f32; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let step = eps * (1.0 + orig.abs());
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Central-difference gradient in float64, for use with the [`super::refmath`]
/// reference forwards.
pub fn finite_diff_grad64(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut grad = vec![0.0f64; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = x[i];
        let step = eps * (1.0 + orig.abs());
        probe[i] = orig + step;
        let fp = f(&probe);
        probe[i] = orig - step;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error used by every gradient check:
/// `|a - n| / max(1e-8, |a| + |n|, 0.01 * peak)`, maxed over coordinates,
/// where `peak` is the largest magnitude in either gradient.
///
/// The `peak` floor keeps the check well-posed in float32: a coordinate whose
/// true gradient is near zero carries difference noise comparable to its own
/// magnitude, so it is judged against the gradient's scale instead.
pub fn max_rel_err(analytic: &[f32], numeric: &[f32]) -> f32 {
    assert_eq!(analytic.len(), numeric.len());
    let peak = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f32, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (1e-8f32).max(a.abs() + n.abs()).max(0.01 * peak))
        .fold(0.0f32, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Array4::from_vec([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(&mut |a| a.data().iter().map(|v| v * v).sum(), &x, 1e-4);
        assert!((g[0] - 2.0).abs() < 1e-2);
        assert!((g[1] - 4.0).abs() < 1e-2);
    }

    #[test]
    fn linear_function_is_exact_for_any_eps() {
        let x = Array4::from_vec([1, 3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
        for eps in [1e-1, 1e-2, 1e-3] {
            let g = finite_diff_grad(
                &mut |a| 3.0 * a.data()[0] - 2.0 * a.data()[1] + 0.5 * a.data()[2],
                &x,
                eps,
            );
            assert!((g[0] - 3.0).abs() < 1e-3, "eps={eps}");
            assert!((g[1] + 2.0).abs() < 1e-3, "eps={eps}");
            assert!((g[2] - 0.5).abs() < 1e-3, "eps={eps}");
        }
    }
}
