//! Tape assembly for the dynamics level: object detection, tailored effect
//! inference, motion composition, background memory and frame prediction.

use super::localize::InstanceRecord;
use super::{in_prefix, rn_prefix, DynConfig, OD_PREFIX};
use crate::diffcore::{Array4, Tape, Var};
use crate::nets::{self, Binder};
use crate::Result;

/// Object detector forward: frames `[n, 3, H, W]` to softmax object masks
/// `[n, n_classes, H, W]` (dynamic channels first).
pub fn detect_objects(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &crate::diffcore::ParameterSet,
    cfg: &DynConfig,
    frames: Var,
) -> Result<Var> {
    let (_, masks) =
        nets::mask_head_forward(tape, binder, params, OD_PREFIX, frames, cfg.n_classes())?;
    Ok(masks)
}

/// Run the detector in eval mode on a stack of frames, returning the detached
/// mask raster.
pub fn detect_masks_eval(
    params: &crate::diffcore::ParameterSet,
    cfg: &DynConfig,
    frames: &Array4,
) -> Result<Array4> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params, false);
    let v = tape.constant(frames.clone());
    let masks = detect_objects(&mut tape, &mut binder, params, cfg, v)?;
    Ok(tape.value(masks).clone())
}

/// Per-instance tape variables produced by [`instances_forward`].
pub struct InstanceVars {
    /// Class-mask crop `[1, 1, side, side]` at the instance box.
    pub x_crop: Var,
    /// Expected location in full-frame coordinates, `[1, 2, 1, 1]`.
    pub loc: Var,
    /// Total effect matrix (relations + inertia), `[1, 2*n_a, 1, 1]`.
    pub e_total: Var,
    /// Motion vector for the executed action, `[1, 2, 1, 1]`.
    pub motion: Var,
}

/// Build crops, effects and motions for a set of instances drawn from
/// (possibly several) samples. Relation and inertia nets are batched over all
/// instances of a class so batch norm sees more than one row.
///
/// `instances[i] = (sample_masks_var, record)`; `histories[i]` holds the
/// `[1, h, w, w]` detached past crops (the current crop comes from the
/// tailored window); `actions[i]` is the executed action of instance `i`'s
/// sample.
pub fn instances_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &crate::diffcore::ParameterSet,
    cfg: &DynConfig,
    instances: &[(Var, InstanceRecord)],
    histories: &[Array4],
    actions: &[usize],
) -> Result<Vec<InstanceVars>> {
    assert_eq!(instances.len(), histories.len());
    assert_eq!(instances.len(), actions.len());
    let mesh = tape.constant(nets::meshgrid(cfg.window));
    // Stage 1: crops, locations and tailored windows per instance.
    let mut x_crops = Vec::with_capacity(instances.len());
    let mut locs = Vec::with_capacity(instances.len());
    let mut tailors = Vec::with_capacity(instances.len());
    for (masks, rec) in instances {
        let ch = tape.slice_c(*masks, rec.class, rec.class + 1);
        let center =
            tape.constant(Array4::vec2(rec.region.center.0 as f32, rec.region.center.1 as f32));
        let side = rec.region.sides().0;
        let x_crop = tape.crop_window(ch, center, side)?;
        let loc_crop = tape.expected_loc(x_crop)?;
        let (tr, tc) = rec.region.top_left();
        let offset = tape.constant(Array4::vec2(tr as f32, tc as f32));
        let loc = tape.add(loc_crop, offset);
        let tailor = tape.crop_window(*masks, loc, cfg.window)?;
        x_crops.push(x_crop);
        locs.push(loc);
        tailors.push(tailor);
    }
    // Stage 2: batched effect nets per dynamic class.
    let mut e_total: Vec<Option<Var>> = vec![None; instances.len()];
    for class in 0..cfg.n_dynamic {
        let members: Vec<usize> = instances
            .iter()
            .enumerate()
            .filter(|(_, (_, r))| r.class == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let mut sums: Vec<Option<Var>> = vec![None; members.len()];
        for j in 0..cfg.n_classes() {
            let rows: Vec<Var> = members
                .iter()
                .map(|&i| {
                    let cj = tape.slice_c(tailors[i], j, j + 1);
                    tape.concat_c(&[cj, mesh])
                })
                .collect();
            let batch = tape.stack_n(&rows);
            let e = nets::effect_net_forward(tape, binder, params, &rn_prefix(class, j), batch)?;
            for (row, slot) in sums.iter_mut().enumerate() {
                let e_row = tape.slice_n(e, row);
                *slot = Some(match *slot {
                    Some(acc) => tape.add(acc, e_row),
                    None => e_row,
                });
            }
        }
        // Inertia effects: past crops (constants) plus the current own-class
        // window taken straight from the tailored crop, oldest first.
        let hist_rows: Vec<Var> = members
            .iter()
            .map(|&i| {
                let past = tape.constant(histories[i].clone());
                let current = tape.slice_c(tailors[i], class, class + 1);
                tape.concat_c(&[past, current])
            })
            .collect();
        let hist_batch = tape.stack_n(&hist_rows);
        let e_self = nets::effect_net_forward(tape, binder, params, &in_prefix(class), hist_batch)?;
        for (row, &i) in members.iter().enumerate() {
            let self_row = tape.slice_n(e_self, row);
            let total = tape.add(sums[row].unwrap(), self_row);
            e_total[i] = Some(total);
        }
    }
    // Stage 3: action-column selection.
    let mut out = Vec::with_capacity(instances.len());
    for i in 0..instances.len() {
        let e = e_total[i].expect("every instance class is covered");
        let motion = tape.column_select(e, &[actions[i]], cfg.n_actions)?;
        out.push(InstanceVars { x_crop: x_crops[i], loc: locs[i], e_total: e, motion });
    }
    Ok(out)
}

/// One background-memory step on the tape:
/// `B_t = alpha * B_prev + (1 - alpha) * I_t (x) sum(S_t)`.
pub fn background_update(
    tape: &mut Tape,
    cfg: &DynConfig,
    frame_t: Var,
    masks_t: Var,
    b_prev: &Array4,
) -> Result<Var> {
    let statics = tape.slice_c(masks_t, cfg.n_dynamic, cfg.n_classes());
    let s_sum = tape.sum_channels(statics);
    let masked = tape.mul_bcast_c(frame_t, s_sum);
    let fresh = tape.scale(masked, 1.0 - cfg.alpha_bg);
    let prev = tape.constant(b_prev.clone());
    let decayed = tape.scale(prev, cfg.alpha_bg);
    Ok(tape.add(decayed, fresh))
}

/// Composite the next frame: warp each instance's mask (and masked pixels) by
/// its motion, then fill everything the moved instances vacate from the
/// background memory.
pub fn predict_frame(
    tape: &mut Tape,
    frame_t: Var,
    insts: &[(&InstanceRecord, &InstanceVars)],
    bg: Var,
) -> Result<Var> {
    let (h, w) = (tape.value(frame_t).h(), tape.value(frame_t).w());
    let mut warped_mask_sum: Option<Var> = None;
    let mut warped_pix_sum: Option<Var> = None;
    for (rec, vars) in insts {
        let (tr, tc) = rec.region.top_left();
        let lifted = tape.plant(vars.x_crop, h, w, tr, tc);
        let pixels = tape.mul_bcast_c(frame_t, lifted);
        let wmask = tape.bilinear_warp(lifted, vars.motion);
        let wpix = tape.bilinear_warp(pixels, vars.motion);
        warped_mask_sum = Some(match warped_mask_sum {
            Some(acc) => tape.add(acc, wmask),
            None => wmask,
        });
        warped_pix_sum = Some(match warped_pix_sum {
            Some(acc) => tape.add(acc, wpix),
            None => wpix,
        });
    }
    match (warped_mask_sum, warped_pix_sum) {
        (Some(wm), Some(wp)) => {
            let negated = tape.affine(wm, -1.0, 1.0);
            let hole = tape.clamp01(negated);
            let bg_part = tape.mul_bcast_c(bg, hole);
            Ok(tape.add(bg_part, wp))
        }
        _ => Ok(bg),
    }
}

/// Pure helper mirroring the motion composition for tests and the planner:
/// effects stored row-major `[2, n_a]`, summed then indexed by the action.
pub fn compose_motion_value(effects: &[Vec<f32>], n_actions: usize, action: usize) -> (f32, f32) {
    assert!(action < n_actions, "motion composition needs a one-hot action");
    let mut sum = vec![0.0f32; 2 * n_actions];
    for e in effects {
        assert_eq!(e.len(), 2 * n_actions);
        for (s, v) in sum.iter_mut().zip(e) {
            *s += v;
        }
    }
    (sum[action], sum[n_actions + action])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParameterSet;
    use crate::proposal::RegionBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn motion_composition_selects_the_action_column_and_is_linear() {
        let na = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let e1: Vec<f32> = (0..2 * na).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let e2: Vec<f32> = (0..2 * na).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
            let a = rng.gen_range(0..na);
            let m = compose_motion_value(&[e1.clone(), e2.clone()], na, a);
            assert_eq!(m.0, e1[a] + e2[a]);
            assert_eq!(m.1, e1[na + a] + e2[na + a]);
            // Doubling every effect doubles the motion.
            let d1: Vec<f32> = e1.iter().map(|v| 2.0 * v).collect();
            let d2: Vec<f32> = e2.iter().map(|v| 2.0 * v).collect();
            let md = compose_motion_value(&[d1, d2], na, a);
            assert!((md.0 - 2.0 * m.0).abs() < 1e-6);
            assert!((md.1 - 2.0 * m.1).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_effects_give_zero_motion() {
        let m = compose_motion_value(&[vec![0.0; 12], vec![0.0; 12]], 6, 3);
        assert_eq!(m, (0.0, 0.0));
    }

    #[test]
    fn background_memory_matches_its_closed_form() {
        // With sum(S) == 1 everywhere and a constant frame, B_t = (1 - a^t) I.
        let cfg = DynConfig::default();
        let frame = Array4::filled([1, 3, 8, 8], 0.6);
        // Masks: all mass in one static channel.
        let mut masks = Array4::zeros([1, cfg.n_classes(), 8, 8]);
        for p in 0..64 {
            masks.plane_mut(0, cfg.n_dynamic)[p] = 1.0;
        }
        let mut b = Array4::zeros([1, 3, 8, 8]);
        for t in 1..=10 {
            let mut tape = Tape::new();
            let fv = tape.constant(frame.clone());
            let mv = tape.constant(masks.clone());
            let bv = background_update(&mut tape, &cfg, fv, mv, &b).unwrap();
            b = tape.value(bv).clone();
            let want = (1.0 - cfg.alpha_bg.powi(t)) * 0.6;
            for v in b.data() {
                assert!((v - want).abs() < 1e-5, "t={t}: {v} vs {want}");
            }
        }
        // All-dynamic masks freeze the memory at zero.
        let mut dyn_masks = Array4::zeros([1, cfg.n_classes(), 8, 8]);
        for p in 0..64 {
            dyn_masks.plane_mut(0, 0)[p] = 1.0;
        }
        let mut b = Array4::zeros([1, 3, 8, 8]);
        for _ in 0..5 {
            let mut tape = Tape::new();
            let fv = tape.constant(frame.clone());
            let mv = tape.constant(dyn_masks.clone());
            let bv = background_update(&mut tape, &cfg, fv, mv, &b).unwrap();
            b = tape.value(bv).clone();
        }
        assert!(b.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn background_closed_form_on_random_sequences() {
        let cfg = DynConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut frames = Vec::new();
        let mut s_sums = Vec::new();
        let mut b = Array4::zeros([1, 3, 6, 6]);
        for _ in 0..8 {
            let f = Array4::from_vec(
                [1, 3, 6, 6],
                (0..108).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
            )
            .unwrap();
            // Random static distribution: spread mass over the static channels.
            let mut masks = Array4::zeros([1, cfg.n_classes(), 6, 6]);
            let mut s_sum = vec![0.0f32; 36];
            for p in 0..36 {
                let total: f32 = rng.gen_range(0.0..1.0);
                masks.plane_mut(0, cfg.n_dynamic)[p] = total * 0.7;
                masks.plane_mut(0, cfg.n_dynamic + 1)[p] = total * 0.3;
                masks.plane_mut(0, 0)[p] = 1.0 - total;
                s_sum[p] = total;
            }
            let mut tape = Tape::new();
            let fv = tape.constant(f.clone());
            let mv = tape.constant(masks);
            let bv = background_update(&mut tape, &cfg, fv, mv, &b).unwrap();
            b = tape.value(bv).clone();
            frames.push(f);
            s_sums.push(s_sum);
        }
        // Closed form: B_t = (1-a) * sum_k a^(t-k) I_k (x) S_k.
        let t = frames.len();
        for ch in 0..3 {
            for p in 0..36 {
                let mut want = 0.0f32;
                for (k, f) in frames.iter().enumerate() {
                    want += cfg.alpha_bg.powi((t - 1 - k) as i32)
                        * (1.0 - cfg.alpha_bg)
                        * f.plane(0, ch)[p]
                        * s_sums[k][p];
                }
                let got = b.plane(0, ch)[p];
                assert!((got - want).abs() < 1e-5, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn predicted_frame_shifts_the_sprite_and_backfills_from_memory() {
        let cfg = DynConfig::default();
        let mut params = ParameterSet::new();
        register_dyn_params(&mut params, &cfg).unwrap();
        // Hand-built scene: one sprite on a known background.
        let (h, w) = (16usize, 16usize);
        let mut frame = Array4::filled([1, 3, h, w], 0.25);
        for r in 6..10 {
            for c in 6..10 {
                frame.set(0, 1, r, c, 0.9);
            }
        }
        let bg = Array4::filled([1, 3, h, w], 0.25);
        let mut tape = Tape::new();
        let fv = tape.constant(frame.clone());
        let bgv = tape.constant(bg.clone());
        // Perfect instance crop over the sprite.
        let rec = InstanceRecord {
            class: 0,
            region: RegionBox { center: (7, 7), half: (4, 4), scale: 0 },
            loc: (7.5, 7.5),
            mass: 16.0,
            score: 0.0,
        };
        let mut crop = Array4::zeros([1, 1, 9, 9]);
        for r in 3..7 {
            for c in 3..7 {
                crop.set(0, 0, r, c, 1.0);
            }
        }
        let x_crop = tape.constant(crop);
        let loc = tape.constant(Array4::vec2(7.5, 7.5));
        let motion = tape.constant(Array4::vec2(0.0, 2.0));
        let e_total = tape.constant(Array4::zeros([1, 12, 1, 1]));
        let vars = InstanceVars { x_crop, loc, e_total, motion };
        let pred = predict_frame(&mut tape, fv, &[(&rec, &vars)], bgv).unwrap();
        let pv = tape.value(pred);
        // Sprite pixels appear exactly two columns right.
        for r in 6..10 {
            for c in 8..12 {
                assert!((pv.at(0, 1, r, c) - 0.9).abs() < 1e-5, "moved sprite at ({r},{c})");
            }
            // The vacated columns read from the background.
            for c in 6..8 {
                assert!((pv.at(0, 1, r, c) - 0.25).abs() < 1e-5, "backfill at ({r},{c})");
            }
        }
        // Composite stays in range.
        assert!(pv.data().iter().all(|v| *v >= -1e-6 && *v <= 1.0 + 1e-6));
    }

    #[test]
    fn predicted_frame_with_zero_motion_reproduces_static_scene() {
        let (h, w) = (12usize, 12usize);
        let frame = Array4::filled([1, 3, h, w], 0.4);
        let mut tape = Tape::new();
        let fv = tape.constant(frame.clone());
        let bgv = tape.constant(frame.clone());
        let rec = InstanceRecord {
            class: 0,
            region: RegionBox { center: (5, 5), half: (2, 2), scale: 0 },
            loc: (5.0, 5.0),
            mass: 4.0,
            score: 0.0,
        };
        let mut crop = Array4::zeros([1, 1, 5, 5]);
        for r in 1..4 {
            for c in 1..4 {
                crop.set(0, 0, r, c, 1.0);
            }
        }
        let x_crop = tape.constant(crop);
        let loc = tape.constant(Array4::vec2(5.0, 5.0));
        let motion = tape.constant(Array4::vec2(0.0, 0.0));
        let e_total = tape.constant(Array4::zeros([1, 12, 1, 1]));
        let vars = InstanceVars { x_crop, loc, e_total, motion };
        let pred = predict_frame(&mut tape, fv, &[(&rec, &vars)], bgv).unwrap();
        for (a, b) in tape.value(pred).data().iter().zip(frame.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    use super::super::register_dyn_params;

    #[test]
    fn instances_forward_produces_effects_with_the_right_shapes() {
        let cfg = DynConfig::default();
        let mut params = ParameterSet::new();
        register_dyn_params(&mut params, &cfg).unwrap();
        let mut masks = Array4::filled([1, cfg.n_classes(), 48, 48], 0.01);
        for r in 20..24 {
            for c in 20..24 {
                masks.set(0, 0, r, c, 0.9);
            }
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&params, false);
        let mv = tape.constant(masks);
        let rec = InstanceRecord {
            class: 0,
            region: RegionBox { center: (21, 21), half: (4, 4), scale: 0 },
            loc: (21.5, 21.5),
            mass: 14.0,
            score: 0.0,
        };
        let hist = Array4::zeros([1, cfg.history, cfg.window, cfg.window]);
        let out = instances_forward(
            &mut tape,
            &mut binder,
            &params,
            &cfg,
            &[(mv, rec)],
            &[hist],
            &[2],
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(tape.value(out[0].e_total).shape(), [1, 2 * cfg.n_actions, 1, 1]);
        assert_eq!(tape.value(out[0].motion).shape(), [1, 2, 1, 1]);
        assert_eq!(tape.value(out[0].loc).shape(), [1, 2, 1, 1]);
        // Location lands on the sprite.
        let loc = tape.value(out[0].loc);
        assert!((loc.data()[0] - 21.5).abs() < 0.2);
    }
}
