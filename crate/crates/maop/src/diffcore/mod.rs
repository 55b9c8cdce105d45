//! Minimal differentiable numeric substrate: rank-4 float arrays, a Wengert
//! tape with the op set the trainable modules need (conv / batch norm /
//! activations / dense / bilinear warping / window crops), Adam, and a
//! finite-difference gradient oracle for tests.

mod array;
pub mod gradcheck;
mod linalg;
pub mod refmath;
mod sampling;
mod tape;

pub mod optim;

pub use array::Array4;
pub use gradcheck::{finite_diff_grad, finite_diff_grad64, max_rel_err};
pub use linalg::conv_out_len;
pub use optim::{AdamState, Param, ParameterSet};
pub use sampling::bilerp_zero;
pub use tape::{BnMode, Grads, Tape, Var};

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Array4 {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Array4::from_vec(shape, data).unwrap()
    }

    /// Check the tape gradient w.r.t. one input against the finite-difference
    /// oracle. `build` returns any output tensor; the scalar loss is a fixed
    /// random projection of it, which keeps the float32 difference
    /// well-conditioned while still exercising the full Jacobian.
    fn check_grad(
        build: &dyn Fn(&mut Tape, Var) -> Var,
        x: &Array4,
        eps: f32,
        tol: f32,
    ) -> f32 {
        let project = |t: &mut Tape, y: Var| -> Var {
            let shape = t.value(y).shape();
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
            let len: usize = shape.iter().product();
            let r = Array4::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .unwrap();
            let vr = t.constant(r);
            let p = t.mul(y, vr);
            t.sum_all(p)
        };
        let mut tape = Tape::new();
        let vx = tape.trainable(x.clone());
        let y = build(&mut tape, vx);
        let loss = project(&mut tape, y);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(vx).expect("input should receive a gradient").to_vec();
        let numeric = finite_diff_grad(
            &mut |probe| {
                let mut t = Tape::new();
                let v = t.constant(probe.clone());
                let yy = build(&mut t, v);
                let l = project(&mut t, yy);
                t.value(l).item()
            },
            x,
            eps,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= tol, "gradient mismatch: rel err {err} > {tol}");
        err
    }

    /// Like [`check_grad`], but the finite differences run through an
    /// independent float64 reference forward, so the spec tolerance holds on
    /// every coordinate.
    fn check_grad_ref(
        build: &dyn Fn(&mut Tape, Var) -> Var,
        reference: &dyn Fn(&refmath::RefArray) -> refmath::RefArray,
        x: &Array4,
        tol: f32,
    ) -> f32 {
        let mut tape = Tape::new();
        let vx = tape.trainable(x.clone());
        let y = build(&mut tape, vx);
        let yshape = tape.value(y).shape();
        // Forward agreement between the two implementations.
        let ref_y = reference(&refmath::RefArray::from_f32(x));
        assert_eq!(ref_y.shape, yshape, "reference output shape mismatch");
        for (a, b) in tape.value(y).data().iter().zip(&ref_y.data) {
            assert!((*a as f64 - b).abs() < 1e-3, "forward mismatch {a} vs {b}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_cafe);
        let len: usize = yshape.iter().product();
        let r: Vec<f32> = (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let vr = tape.constant(Array4::from_vec(yshape, r.clone()).unwrap());
        let p = tape.mul(y, vr);
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(vx).expect("input should receive a gradient").to_vec();
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let numeric64 = finite_diff_grad64(
            &mut |probe| {
                let pa = refmath::RefArray { shape: x.shape(), data: probe.to_vec() };
                let out = reference(&pa);
                out.data.iter().zip(&r).map(|(v, rv)| v * *rv as f64).sum()
            },
            &x64,
            1e-3,
        );
        let numeric: Vec<f32> = numeric64.iter().map(|&v| v as f32).collect();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err <= tol, "gradient mismatch vs f64 reference: rel err {err} > {tol}");
        err
    }

    // ── conv2d ───────────────────────────────────────────────────────────

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut rng, [2, 1, 4, 4]);
        let mut t = Tape::new();
        let vx = t.constant(x.clone());
        let w = t.constant(Array4::from_vec([1, 1, 1, 1], vec![1.0]).unwrap());
        let b = t.constant(Array4::zeros([1, 1, 1, 1]));
        let y = t.conv2d(vx, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), x.data());
    }

    #[test]
    fn conv_32_filters_3x3_stride1_keeps_48x48() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, [1, 3, 48, 48]);
        let w = randn(&mut rng, [32, 3, 3, 3]);
        let b = randn(&mut rng, [1, 32, 1, 1]);
        let mut t = Tape::new();
        let (vx, vw, vb) = (t.constant(x), t.constant(w), t.constant(b));
        let y = t.conv2d(vx, vw, vb, 1, 1).unwrap();
        assert_eq!(t.value(y).shape(), [1, 32, 48, 48]);
    }

    #[test]
    fn conv_output_dims_follow_floor_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, [1, 2, 11, 9]);
        let w = randn(&mut rng, [4, 2, 3, 3]);
        let b = randn(&mut rng, [1, 4, 1, 1]);
        let mut t = Tape::new();
        let (vx, vw, vb) = (t.constant(x), t.constant(w), t.constant(b));
        let y = t.conv2d(vx, vw, vb, 2, 1).unwrap();
        assert_eq!(t.value(y).shape(), [1, 4, (11 + 2 - 3) / 2 + 1, (9 + 2 - 3) / 2 + 1]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, [1, 3, 5, 5]);
        let w = randn(&mut rng, [2, 4, 3, 3]);
        let b = randn(&mut rng, [1, 2, 1, 1]);
        let mut t = Tape::new();
        let (vx, vw, vb) = (t.constant(x), t.constant(w), t.constant(b));
        assert!(t.conv2d(vx, vw, vb, 1, 1).is_err());
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, [1, 1, 5, 5]);
        let w = randn(&mut rng, [2, 1, 3, 3]);
        let b = randn(&mut rng, [1, 2, 1, 1]);
        let x64 = refmath::RefArray::from_f32(&x);
        let w64 = refmath::RefArray::from_f32(&w);
        let b64: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
        // Gradient w.r.t. the input.
        let (wc, bc) = (w.clone(), b.clone());
        let (w64c, b64c) = (w64.clone(), b64.clone());
        check_grad_ref(
            &move |t, vx| {
                let vw = t.constant(wc.clone());
                let vb = t.constant(bc.clone());
                t.conv2d(vx, vw, vb, 1, 1).unwrap()
            },
            &move |xr| refmath::conv2d(xr, &w64c, &b64c, 1, 1),
            &x,
            1e-3,
        );
        // Gradient w.r.t. the weights.
        let (xc, bc) = (x.clone(), b.clone());
        let (x64c, b64c) = (x64.clone(), b64.clone());
        check_grad_ref(
            &move |t, vw| {
                let vx = t.constant(xc.clone());
                let vb = t.constant(bc.clone());
                t.conv2d(vx, vw, vb, 1, 1).unwrap()
            },
            &move |wr| refmath::conv2d(&x64c, wr, &b64c, 1, 1),
            &w,
            1e-3,
        );
        // Gradient w.r.t. the bias.
        check_grad_ref(
            &move |t, vb| {
                let vx = t.constant(x.clone());
                let vw = t.constant(w.clone());
                t.conv2d(vx, vw, vb, 1, 1).unwrap()
            },
            &move |br| refmath::conv2d(&x64, &w64, &br.data, 1, 1),
            &b,
            1e-3,
        );
    }

    // ── batch norm ───────────────────────────────────────────────────────

    #[test]
    fn batch_norm_constant_input_normalizes_to_zero() {
        let x = Array4::filled([2, 3, 4, 4], 5.0);
        let mut t = Tape::new();
        let vx = t.constant(x);
        let g = t.constant(Array4::filled([1, 3, 1, 1], 1.0));
        let b = t.constant(Array4::zeros([1, 3, 1, 1]));
        let y = t.batch_norm(vx, g, b, None, BnMode::Train, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn batch_norm_zero_gamma_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, [2, 2, 3, 3]);
        let mut t = Tape::new();
        let vx = t.constant(x);
        let g = t.constant(Array4::zeros([1, 2, 1, 1]));
        let b = t.constant(Array4::from_vec([1, 2, 1, 1], vec![0.7, -0.3]).unwrap());
        let y = t.batch_norm(vx, g, b, None, BnMode::Train, 1e-5).unwrap();
        for ni in 0..2 {
            assert!(t.value(y).plane(ni, 0).iter().all(|v| (v - 0.7).abs() < 1e-6));
            assert!(t.value(y).plane(ni, 1).iter().all(|v| (v + 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, [2, 4, 3, 3]);
        let gamma = randn(&mut rng, [1, 4, 1, 1]);
        let beta = randn(&mut rng, [1, 4, 1, 1]);
        let g64: Vec<f64> = gamma.data().iter().map(|&v| v as f64).collect();
        let b64: Vec<f64> = beta.data().iter().map(|&v| v as f64).collect();
        let x64 = refmath::RefArray::from_f32(&x);
        let (gc, bc) = (gamma.clone(), beta.clone());
        let (g64c, b64c) = (g64.clone(), b64.clone());
        check_grad_ref(
            &move |t, vx| {
                let g = t.constant(gc.clone());
                let b = t.constant(bc.clone());
                t.batch_norm(vx, g, b, None, BnMode::Train, 1e-5).unwrap()
            },
            &move |xr| refmath::batch_norm_train(xr, &g64c, &b64c, 1e-5),
            &x,
            1e-3,
        );
        let xc = x.clone();
        check_grad_ref(
            &move |t, vg| {
                let vx = t.constant(xc.clone());
                let b = t.constant(beta.clone());
                t.batch_norm(vx, vg, b, None, BnMode::Train, 1e-5).unwrap()
            },
            &move |gr| refmath::batch_norm_train(&x64, &gr.data, &b64, 1e-5),
            &gamma,
            1e-3,
        );
    }

    // ── activations ──────────────────────────────────────────────────────

    #[test]
    fn relu_clamps_negatives() {
        let mut t = Tape::new();
        let x = t.constant(Array4::from_vec([1, 2, 1, 1], vec![-3.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn channel_softmax_equal_logits_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Array4::filled([1, 4, 2, 2], 0.3));
        let y = t.channel_softmax(x).unwrap();
        assert!(t.value(y).data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn channel_softmax_is_a_per_pixel_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, [2, 5, 6, 6]);
        let mut t = Tape::new();
        let vx = t.constant(x);
        let y = t.channel_softmax(vx).unwrap();
        let v = t.value(y);
        for ni in 0..2 {
            for p in 0..36 {
                let mut s = 0.0;
                for ci in 0..5 {
                    let val = v.plane(ni, ci)[p];
                    assert!(val >= 0.0);
                    s += val;
                }
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_and_sigmoid_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, [1, 3, 4, 4]);
        check_grad_ref(
            &|t, vx| t.channel_softmax(vx).unwrap(),
            &refmath::channel_softmax,
            &x,
            1e-3,
        );
        check_grad_ref(&|t, vx| t.sigmoid(vx), &refmath::sigmoid, &x, 1e-3);
    }

    // ── dense ────────────────────────────────────────────────────────────

    #[test]
    fn dense_identity_weights_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, [3, 4, 1, 1]);
        let mut eye = Array4::zeros([4, 4, 1, 1]);
        for i in 0..4 {
            eye.set(i, i, 0, 0, 1.0);
        }
        let mut t = Tape::new();
        let vx = t.constant(x.clone());
        let vw = t.constant(eye);
        let vb = t.constant(Array4::zeros([1, 4, 1, 1]));
        let y = t.dense(vx, vw, vb).unwrap();
        for (a, b) in t.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn dense_zero_input_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = randn(&mut rng, [3, 5, 1, 1]);
        let b = randn(&mut rng, [1, 3, 1, 1]);
        let mut t = Tape::new();
        let vx = t.constant(Array4::zeros([2, 5, 1, 1]));
        let vw = t.constant(w);
        let vb = t.constant(b.clone());
        let y = t.dense(vx, vw, vb).unwrap();
        for ni in 0..2 {
            for o in 0..3 {
                assert!((t.value(y).at(ni, o, 0, 0) - b.at(0, o, 0, 0)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, [2, 5, 1, 1]);
        let w = randn(&mut rng, [3, 5, 1, 1]);
        let b = randn(&mut rng, [1, 3, 1, 1]);
        let (wc, bc) = (w.clone(), b.clone());
        check_grad(
            &move |t, vx| {
                let vw = t.constant(wc.clone());
                let vb = t.constant(bc.clone());
                let y = t.dense(vx, vw, vb).unwrap();
                y
            },
            &x,
            1e-3,
            1e-3,
        );
        check_grad(
            &move |t, vw| {
                let vx = t.constant(x.clone());
                let vb = t.constant(b.clone());
                let y = t.dense(vx, vw, vb).unwrap();
                y
            },
            &w,
            1e-3,
            1e-3,
        );
    }

    // ── bilinear warp ────────────────────────────────────────────────────

    #[test]
    fn warp_zero_translation_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = randn(&mut rng, [1, 2, 5, 5]);
        let mut t = Tape::new();
        let vx = t.constant(x.clone());
        let tr = t.constant(Array4::vec2(0.0, 0.0));
        let y = t.bilinear_warp(vx, tr);
        assert_eq!(t.value(y).data(), x.data());
    }

    #[test]
    fn warp_integer_shift_matches_index_shift_with_zero_fill() {
        let x = Array4::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut t = Tape::new();
        let vx = t.constant(x);
        let tr = t.constant(Array4::vec2(1.0, 0.0));
        let y = t.bilinear_warp(vx, tr);
        let want = [0.0, 0.0, 1.0, 2.0];
        for (a, b) in t.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_random_integer_shift_equals_index_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = randn(&mut rng, [1, 1, 7, 6]);
        for (dr, dc) in [(2i64, -1i64), (-3, 2), (0, 4)] {
            let mut t = Tape::new();
            let vx = t.constant(x.clone());
            let tr = t.constant(Array4::vec2(dr as f32, dc as f32));
            let y = t.bilinear_warp(vx, tr);
            for u in 0..7i64 {
                for v in 0..6i64 {
                    let (su, sv) = (u - dr, v - dc);
                    let want = if su >= 0 && su < 7 && sv >= 0 && sv < 6 {
                        x.at(0, 0, su as usize, sv as usize)
                    } else {
                        0.0
                    };
                    let got = t.value(y).at(0, 0, u as usize, v as usize);
                    assert!((got - want).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn warp_translation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let img = randn(&mut rng, [1, 1, 6, 6]);
        let tr = Array4::vec2(0.3, -0.7);
        let imgc = img.clone();
        check_grad(
            &move |t, vtr| {
                let vi = t.constant(imgc.clone());
                let y = t.bilinear_warp(vi, vtr);
                y
            },
            &tr,
            1e-3,
            1e-2,
        );
        // And w.r.t. the image at a fractional shift.
        let trc = tr.clone();
        check_grad(
            &move |t, vi| {
                let vtr = t.constant(trc.clone());
                let y = t.bilinear_warp(vi, vtr);
                y
            },
            &img,
            1e-3,
            1e-2,
        );
    }

    // ── crop window ──────────────────────────────────────────────────────

    #[test]
    fn crop_integer_center_is_exact_subarray() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let m = randn(&mut rng, [1, 1, 9, 9]);
        let mut t = Tape::new();
        let vm = t.constant(m.clone());
        let c = t.constant(Array4::vec2(4.0, 4.0));
        let y = t.crop_window(vm, c, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.value(y).at(0, 0, i, j), m.at(0, 0, 3 + i, 3 + j));
            }
        }
    }

    #[test]
    fn crop_at_corner_zero_pads_three_quadrants() {
        let m = Array4::filled([1, 1, 8, 8], 1.0);
        let mut t = Tape::new();
        let vm = t.constant(m);
        let c = t.constant(Array4::vec2(0.0, 0.0));
        let y = t.crop_window(vm, c, 5).unwrap();
        let v = t.value(y);
        let inside: f32 = (2..5).map(|i| (2..5).map(|j| v.at(0, 0, i, j)).sum::<f32>()).sum();
        let total: f32 = v.data().iter().sum();
        assert!((inside - 9.0).abs() < 1e-6);
        assert!((total - inside).abs() < 1e-6, "everything outside must be zero");
    }

    #[test]
    fn crop_fractional_center_matches_hand_bilinear() {
        // Ramp image: value = row + 0.1 * col, so interpolation is linear and
        // the expected crop values can be written down directly.
        let mut m = Array4::zeros([1, 1, 21, 21]);
        for u in 0..21 {
            for v in 0..21 {
                m.set(0, 0, u, v, u as f32 + 0.1 * v as f32);
            }
        }
        let mut t = Tape::new();
        let vm = t.constant(m);
        let c = t.constant(Array4::vec2(10.5, 10.5));
        let y = t.crop_window(vm, c, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = (10.5 - 1.0 + i as f32) + 0.1 * (10.5 - 1.0 + j as f32);
                assert!((t.value(y).at(0, 0, i, j) - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn crop_center_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = randn(&mut rng, [1, 2, 10, 10]);
        let center = Array4::vec2(4.3, 5.6);
        check_grad(
            &move |t, vc| {
                let vm = t.constant(m.clone());
                t.crop_window(vm, vc, 5).unwrap()
            },
            &center,
            1e-3,
            1e-2,
        );
    }

    #[test]
    fn crop_requires_odd_size() {
        let mut t = Tape::new();
        let m = t.constant(Array4::zeros([1, 1, 8, 8]));
        let c = t.constant(Array4::vec2(4.0, 4.0));
        assert!(t.crop_window(m, c, 4).is_err());
    }

    // ── misc ops feeding the upper levels ────────────────────────────────

    #[test]
    fn expected_loc_is_the_weighted_centroid() {
        let mut m = Array4::zeros([1, 1, 8, 8]);
        m.set(0, 0, 5, 7, 2.0);
        let mut t = Tape::new();
        let vm = t.constant(m);
        let y = t.expected_loc(vm).unwrap();
        assert_eq!(t.value(y).data(), &[5.0, 7.0]);

        let mut m2 = Array4::zeros([1, 1, 8, 8]);
        m2.set(0, 0, 0, 0, 0.25);
        m2.set(0, 0, 4, 0, 0.75);
        let mut t2 = Tape::new();
        let vm2 = t2.constant(m2);
        let y2 = t2.expected_loc(vm2).unwrap();
        assert!((t2.value(y2).data()[0] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn expected_loc_zero_mass_is_an_error() {
        let mut t = Tape::new();
        let vm = t.constant(Array4::zeros([1, 1, 4, 4]));
        assert!(t.expected_loc(vm).is_err());
    }

    #[test]
    fn expected_loc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut m = Array4::zeros([1, 1, 6, 6]);
        for v in m.data_mut() {
            *v = rng.gen_range(0.05f32..1.0);
        }
        check_grad(
            &|t, vm| {
                let y = t.expected_loc(vm).unwrap();
                y
            },
            &m,
            1e-3,
            1e-2,
        );
    }

    #[test]
    fn column_select_picks_the_action_column() {
        // e viewed as 2 x n_a row-major: out = column of the active action.
        let na = 6;
        let mut e = Array4::zeros([1, 2 * na, 1, 1]);
        for a in 0..na {
            e.set(0, a, 0, 0, a as f32);
            e.set(0, na + a, 0, 0, -(a as f32));
        }
        let mut t = Tape::new();
        let ve = t.constant(e);
        let y = t.column_select(ve, &[4], na).unwrap();
        assert_eq!(t.value(y).data(), &[4.0, -4.0]);
    }

    #[test]
    fn upsample_and_plant_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = randn(&mut rng, [1, 1, 3, 3]);
        check_grad(
            &|t, vx| {
                let y = t.upsample(vx, 9, 9);
                y
            },
            &x,
            1e-3,
            1e-3,
        );
        check_grad(
            &|t, vx| {
                let y = t.plant(vx, 6, 6, 2, -1);
                y
            },
            &x,
            1e-3,
            1e-3,
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = randn(&mut rng, [2, 3, 8, 8]);
        let w = randn(&mut rng, [4, 3, 3, 3]);
        let b = randn(&mut rng, [1, 4, 1, 1]);
        let run = || {
            let mut t = Tape::new();
            let (vx, vw, vb) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv2d(vx, vw, vb, 1, 1).unwrap();
            let s = t.channel_softmax(y).unwrap();
            t.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
