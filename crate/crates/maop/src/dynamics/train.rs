//! Training loop for the dynamics level.

use super::localize::{localize_instances, match_instances, InstanceRecord};
use super::model::{background_update, detect_objects, instances_forward, predict_frame};
use super::DynConfig;
use crate::diffcore::{AdamState, Array4, ParameterSet, Tape, Var};
use crate::envsim::Episode;
use crate::nets::Binder;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Exponentially updated per-layout background image.
#[derive(Clone, Debug, Default)]
pub struct BackgroundMemory {
    by_layout: BTreeMap<String, Array4>,
}

impl BackgroundMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, layout: &str, h: usize, w: usize) -> Array4 {
        self.by_layout.get(layout).cloned().unwrap_or_else(|| Array4::zeros([1, 3, h, w]))
    }

    pub fn put(&mut self, layout: &str, b: Array4) {
        self.by_layout.insert(layout.to_string(), b);
    }
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, Default)]
pub struct DlBreakdown {
    pub pred_object: f32,
    pub pred_image: f32,
    pub proposal: f32,
    pub total: f32,
}

/// Detached dynamic-mask planes for frames the tape does not need gradients
/// for (history and localization context). Entries refresh every
/// `refresh_every` steps so localization tracks the improving detector
/// without re-running it for every sample.
struct MaskCache {
    entries: BTreeMap<(usize, usize), (u64, Array4)>,
    refresh_every: u64,
}

impl MaskCache {
    fn new(refresh_every: u64) -> Self {
        MaskCache { entries: BTreeMap::new(), refresh_every }
    }

    fn get(
        &mut self,
        params: &ParameterSet,
        cfg: &DynConfig,
        episodes: &[Episode],
        key: (usize, usize),
        step: u64,
    ) -> Result<Array4> {
        if let Some((stamp, masks)) = self.entries.get(&key) {
            if step.saturating_sub(*stamp) < self.refresh_every {
                return Ok(masks.clone());
            }
        }
        let frame = episodes[key.0].frames[key.1].to_array();
        let masks = super::model::detect_masks_eval(params, cfg, &frame)?;
        self.entries.insert(key, (step, masks.clone()));
        Ok(masks)
    }
}

/// Crop one plane of a detached mask raster at an integer-ish center.
fn crop_plane(masks: &Array4, channel: usize, center: (f32, f32), size: usize) -> Array4 {
    let (h, w) = (masks.h(), masks.w());
    let off = (size as f32 - 1.0) / 2.0;
    let mut out = Array4::zeros([1, 1, size, size]);
    let plane = masks.plane(0, channel);
    for i in 0..size {
        for j in 0..size {
            let y = center.0 - off + i as f32;
            let x = center.1 - off + j as f32;
            out.data_mut()[i * size + j] = crate::diffcore::bilerp_zero(plane, h, w, y, x);
        }
    }
    out
}

/// History stack `[1, h, w, w]` of the instance's own class mask over the
/// previous `h` frames, all centered on the current location (oldest first).
pub(super) fn history_stack(
    planes: &[Array4],
    class: usize,
    loc: (f32, f32),
    window: usize,
) -> Array4 {
    let h = planes.len();
    let mut out = Array4::zeros([1, h, window, window]);
    for (k, masks) in planes.iter().enumerate() {
        let crop = crop_plane(masks, class, loc, window);
        out.plane_mut(0, k).copy_from_slice(crop.data());
    }
    out
}

/// Channel-summed proposal raster `[1, 1, H, W]`.
fn proposal_sum(p: &Array4) -> Array4 {
    let (h, w) = (p.h(), p.w());
    let mut out = Array4::zeros([1, 1, h, w]);
    for c in 0..p.c() {
        let src = p.plane(0, c);
        for (d, s) in out.plane_mut(0, 0).iter_mut().zip(src) {
            *d += s;
        }
    }
    out
}

/// Train the object detector and effect nets with Adam, maintaining the
/// background memory per layout. `proposals[e][t]` are the (frozen) level-2
/// masks. Returns the per-step total-loss curve.
pub fn train_dl(
    params: &mut ParameterSet,
    episodes: &[Episode],
    proposals: &[Vec<Array4>],
    cfg: &DynConfig,
    memory: &mut BackgroundMemory,
) -> Result<Vec<f32>> {
    let mut samples: Vec<(usize, usize)> = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for t in 1..ep.len_steps() {
            samples.push((e, t));
        }
    }
    if samples.is_empty() {
        return Err(Error::Data("no usable dynamics samples (episodes too short?)".into()));
    }
    let (h, w) = (episodes[0].frames[0].h, episodes[0].frames[0].w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(params, cfg.lr);
    let mut cache = MaskCache::new(25);
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps as u64 {
        let picks: Vec<(usize, usize)> =
            (0..cfg.batch).map(|_| samples[rng.gen_range(0..samples.len())]).collect();
        let mut tape = Tape::new();
        let mut binder = Binder::new(params, true);

        // One on-tape detector pass over I_t and I_{t+1} of every sample.
        let mut batch_arr = Array4::zeros([2 * cfg.batch, 3, h, w]);
        for (b, &(e, t)) in picks.iter().enumerate() {
            let ft = episodes[e].frames[t].to_array();
            let ft1 = episodes[e].frames[t + 1].to_array();
            let chw = 3 * h * w;
            batch_arr.data_mut()[b * chw..(b + 1) * chw].copy_from_slice(ft.data());
            batch_arr.data_mut()[(cfg.batch + b) * chw..(cfg.batch + b + 1) * chw]
                .copy_from_slice(ft1.data());
        }
        let frames_var = tape.constant(batch_arr);
        let masks_all = detect_objects(&mut tape, &mut binder, params, cfg, frames_var)?;

        // Per-sample localization on detached rasters.
        let mut inst_inputs: Vec<(Var, InstanceRecord)> = Vec::new();
        let mut histories: Vec<Array4> = Vec::new();
        let mut actions: Vec<usize> = Vec::new();
        let mut per_sample: Vec<(Vec<usize>, Vec<InstanceRecord>, Vec<(usize, usize)>)> =
            Vec::new();
        let mut mask_t_vars = Vec::with_capacity(cfg.batch);
        let mut mask_t1_vars = Vec::with_capacity(cfg.batch);
        for (b, &(e, t)) in picks.iter().enumerate() {
            let m_t_var = tape.slice_n(masks_all, b);
            let m_t1_var = tape.slice_n(masks_all, cfg.batch + b);
            mask_t_vars.push(m_t_var);
            mask_t1_vars.push(m_t1_var);
            let d_cur = tape.value(m_t_var).clone();
            let d_next = tape.value(m_t1_var).clone();
            let d_prev = cache.get(params, cfg, episodes, (e, t - 1), step)?;
            let f_prev = episodes[e].frames[t - 1].to_array();
            let f_cur = episodes[e].frames[t].to_array();
            let f_next = episodes[e].frames[t + 1].to_array();
            let recs_t = localize_instances(&d_prev, &d_cur, &f_prev, &f_cur, cfg, &mut rng);
            let recs_t1 = localize_instances(&d_cur, &d_next, &f_cur, &f_next, cfg, &mut rng);
            let pairs = match_instances(&recs_t, &recs_t1, cfg.window as f32 / 2.0);
            // History planes: frames t-h .. t-1, padded at the episode start.
            let hist_planes: Vec<Array4> = (0..cfg.history)
                .map(|k| {
                    let tt = t.saturating_sub(cfg.history - k);
                    cache.get(params, cfg, episodes, (e, tt), step)
                })
                .collect::<Result<_>>()?;
            let mut idx_here = Vec::new();
            for rec in &recs_t {
                idx_here.push(inst_inputs.len());
                histories.push(history_stack(&hist_planes, rec.class, rec.loc, cfg.window));
                actions.push(episodes[e].actions[t]);
                inst_inputs.push((m_t_var, rec.clone()));
            }
            per_sample.push((idx_here, recs_t1, pairs));
        }

        let inst_vars =
            instances_forward(&mut tape, &mut binder, params, cfg, &inst_inputs, &histories, &actions)?;

        // Per-sample prediction and losses.
        let mut total: Option<Var> = None;
        for (b, &(e, t)) in picks.iter().enumerate() {
            let (ref idx_here, ref recs_t1, ref pairs) = per_sample[b];
            let layout = &episodes[e].layout_name;
            let f_cur_var = tape.slice_n(frames_var, b);
            let f_next_var = tape.slice_n(frames_var, cfg.batch + b);
            let bg = background_update(&mut tape, cfg, f_cur_var, mask_t_vars[b], &memory.get(layout, h, w))?;
            memory.put(layout, tape.value(bg).clone());

            let insts: Vec<(&InstanceRecord, &super::model::InstanceVars)> =
                idx_here.iter().map(|&i| (&inst_inputs[i].1, &inst_vars[i])).collect();
            let pred = predict_frame(&mut tape, f_cur_var, &insts, bg)?;

            // Image loss.
            let idiff = tape.sub(pred, f_next_var);
            let isq = tape.mul(idiff, idiff);
            let isum = tape.sum_all(isq);
            let l_img = tape.scale(isum, 1.0 / (h * w) as f32);

            // Proposal loss on the channel sums.
            let d_t = tape.slice_c(mask_t_vars[b], 0, cfg.n_dynamic);
            let d_sum = tape.sum_channels(d_t);
            let p_sum = tape.constant(proposal_sum(&proposals[e][t]));
            let pdiff = tape.sub(d_sum, p_sum);
            let psq = tape.mul(pdiff, pdiff);
            let psum2 = tape.sum_all(psq);
            let l_prop = tape.scale(psum2, 1.0 / (h * w) as f32);

            // Object loss over matched instances; the t+1 location reads the
            // next frame's masks on-tape.
            let mut l_obj: Option<Var> = None;
            for &(i_t, i_t1) in pairs {
                let inst_idx = idx_here[i_t];
                let rec1 = &recs_t1[i_t1];
                let ch1 = tape.slice_c(mask_t1_vars[b], rec1.class, rec1.class + 1);
                let center1 = tape
                    .constant(Array4::vec2(rec1.region.center.0 as f32, rec1.region.center.1 as f32));
                let x1 = tape.crop_window(ch1, center1, rec1.region.sides().0)?;
                let loc1_crop = tape.expected_loc(x1)?;
                let (tr, tc) = rec1.region.top_left();
                let off1 = tape.constant(Array4::vec2(tr as f32, tc as f32));
                let loc1 = tape.add(loc1_crop, off1);
                let moved = tape.add(inst_vars[inst_idx].loc, inst_vars[inst_idx].motion);
                let diff = tape.sub(moved, loc1);
                let sq = tape.mul(diff, diff);
                let term = tape.sum_all(sq);
                l_obj = Some(match l_obj {
                    Some(acc) => tape.add(acc, term),
                    None => term,
                });
            }
            let l_obj = l_obj.unwrap_or_else(|| tape.constant(Array4::scalar(0.0)));

            let w_img = tape.scale(l_img, cfg.lambda_image);
            let w_prop = tape.scale(l_prop, cfg.lambda_proposal);
            let partial = tape.add(l_obj, w_img);
            let sample_loss = tape.add(partial, w_prop);
            total = Some(match total {
                Some(acc) => tape.add(acc, sample_loss),
                None => sample_loss,
            });
        }

        let total = total.expect("batch is non-empty");
        let loss = tape.scale(total, 1.0 / cfg.batch as f32);
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!("dynamics training diverged at step {step}")));
        }
        curve.push(loss_val);
        let grads = tape.backward(loss)?;
        let slots = binder.collect_grads(params, &grads);
        adam.step(params, &slots)?;
        binder.apply_bn_updates(&tape, params)?;
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_episode, LayoutMode, LayoutSpec};

    #[test]
    fn short_training_run_is_finite_and_reproducible() {
        let l = LayoutSpec::generate("t", 3, LayoutMode::Simple);
        let ep = generate_episode(&l, 9);
        // Ground-truth-shaped proposals: dynamic sprites as single channel.
        let mut proposals = Vec::new();
        for t in 0..ep.frames.len() {
            let mut p = Array4::zeros([1, 1, 48, 48]);
            for inst in &ep.truth[t] {
                let (r0, c0) = ((inst.row - 1.5) as usize, (inst.col - 1.5) as usize);
                for r in r0..(r0 + 4).min(48) {
                    for c in c0..(c0 + 4).min(48) {
                        p.set(0, 0, r, c, 1.0);
                    }
                }
            }
            proposals.push(p);
        }
        let eps = vec![ep];
        let props = vec![proposals];
        let run = || {
            let cfg = DynConfig { steps: 2, batch: 2, ..Default::default() };
            let mut params = ParameterSet::new();
            super::super::register_dyn_params(&mut params, &cfg).unwrap();
            let mut memory = BackgroundMemory::new();
            let curve = train_dl(&mut params, &eps, &props, &cfg, &mut memory).unwrap();
            (curve, params.get("od.t1.w").unwrap().data().to_vec())
        };
        let (c1, w1) = run();
        let (c2, w2) = run();
        assert_eq!(c1, c2);
        assert_eq!(w1, w2);
        assert!(c1.iter().all(|v| v.is_finite()));
    }
}
