//! Inference paths: per-episode prediction, autoregressive rollout, and
//! controllable-agent discovery.

use super::localize::{localize_instances, InstanceRecord};
use super::model::{detect_masks_eval, instances_forward, predict_frame};
use super::train::history_stack;
use super::DynConfig;
use crate::diffcore::{Array4, ParameterSet, Tape};
use crate::envsim::Episode;
use crate::nets::Binder;
use crate::proposal::RegionBox;
use crate::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One instance's prediction for the next step.
#[derive(Clone, Debug)]
pub struct PredictedInstance {
    pub class: usize,
    /// Location at the current step.
    pub loc: (f32, f32),
    /// Predicted per-step translation.
    pub motion: (f32, f32),
    /// `loc + motion`.
    pub loc_next: (f32, f32),
    /// Full effect matrix, row-major `[2, n_a]`.
    pub effects: Vec<f32>,
}

/// Model outputs for one evaluated step.
#[derive(Clone, Debug)]
pub struct FramePrediction {
    pub t: usize,
    pub instances: Vec<PredictedInstance>,
    /// Composited next-frame prediction, if requested.
    pub pred_frame: Option<Array4>,
}

fn detect_all_frames(params: &ParameterSet, cfg: &DynConfig, ep: &Episode) -> Result<Vec<Array4>> {
    let (h, w) = (ep.frames[0].h, ep.frames[0].w);
    let mut out = Vec::with_capacity(ep.frames.len());
    let chunk = 16;
    let mut t = 0;
    while t < ep.frames.len() {
        let n = chunk.min(ep.frames.len() - t);
        let mut batch = Array4::zeros([n, 3, h, w]);
        for i in 0..n {
            let f = ep.frames[t + i].to_array();
            let chw = 3 * h * w;
            batch.data_mut()[i * chw..(i + 1) * chw].copy_from_slice(f.data());
        }
        let masks = detect_masks_eval(params, cfg, &batch)?;
        for i in 0..n {
            let mut one = Array4::zeros([1, cfg.n_classes(), h, w]);
            let chw = cfg.n_classes() * h * w;
            one.data_mut().copy_from_slice(&masks.data()[i * chw..(i + 1) * chw]);
            out.push(one);
        }
        t += n;
    }
    Ok(out)
}

fn background_step(cfg: &DynConfig, b: &mut Array4, frame: &Array4, masks: &Array4) {
    let (h, w) = (frame.h(), frame.w());
    let mut s_sum = vec![0.0f32; h * w];
    for c in cfg.n_dynamic..cfg.n_classes() {
        for (d, s) in s_sum.iter_mut().zip(masks.plane(0, c)) {
            *d += s;
        }
    }
    for ch in 0..3 {
        let f = frame.plane(0, ch).to_vec();
        let bp = b.plane_mut(0, ch);
        for p in 0..h * w {
            bp[p] = cfg.alpha_bg * bp[p] + (1.0 - cfg.alpha_bg) * f[p] * s_sum[p];
        }
    }
}

/// Effects + motions for a fixed set of records against given masks, in eval
/// mode. Histories are crops over `hist_planes` (oldest first).
fn effects_for_records(
    params: &ParameterSet,
    cfg: &DynConfig,
    masks: &Array4,
    frame: &Array4,
    records: &[InstanceRecord],
    hist_planes: &[Array4],
    action: usize,
    with_frame: Option<&Array4>, // background for frame compositing
) -> Result<(Vec<PredictedInstance>, Option<Array4>)> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(params, false);
    let masks_var = tape.constant(masks.clone());
    let inputs: Vec<_> = records.iter().map(|r| (masks_var, r.clone())).collect();
    let histories: Vec<Array4> = records
        .iter()
        .map(|r| history_stack(hist_planes, r.class, r.loc, cfg.window))
        .collect();
    let actions = vec![action; records.len()];
    let vars = instances_forward(&mut tape, &mut binder, params, cfg, &inputs, &histories, &actions)?;
    let mut preds = Vec::with_capacity(records.len());
    for (rec, v) in records.iter().zip(&vars) {
        let loc = tape.value(v.loc);
        let m = tape.value(v.motion);
        let e = tape.value(v.e_total);
        let loc = (loc.data()[0], loc.data()[1]);
        let motion = (m.data()[0], m.data()[1]);
        preds.push(PredictedInstance {
            class: rec.class,
            loc,
            motion,
            loc_next: (loc.0 + motion.0, loc.1 + motion.1),
            effects: e.data().to_vec(),
        });
    }
    let pred_frame = if let Some(bg) = with_frame {
        let fv = tape.constant(frame.clone());
        let bgv = tape.constant(bg.clone());
        let pairs: Vec<_> = records.iter().zip(&vars).collect();
        let pf = predict_frame(&mut tape, fv, &pairs, bgv)?;
        Some(tape.value(pf).clone())
    } else {
        None
    };
    Ok((preds, pred_frame))
}

/// Run the trained model over one episode: localize at each step from the
/// `(t-1, t)` pair and predict each instance's next location under the
/// episode's action. Never reads frames past `t` except as training-free
/// ground truth for the caller's metrics.
pub fn predict_episode(
    params: &ParameterSet,
    cfg: &DynConfig,
    ep: &Episode,
    with_frames: bool,
    seed: u64,
) -> Result<Vec<FramePrediction>> {
    let masks = detect_all_frames(params, cfg, ep)?;
    let (h, w) = (ep.frames[0].h, ep.frames[0].w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bg = Array4::zeros([1, 3, h, w]);
    background_step(cfg, &mut bg, &ep.frames[0].to_array(), &masks[0]);
    let mut out = Vec::new();
    for t in 1..ep.len_steps() {
        let frame = ep.frames[t].to_array();
        let records = localize_instances(
            &masks[t - 1],
            &masks[t],
            &ep.frames[t - 1].to_array(),
            &frame,
            cfg,
            &mut rng,
        );
        let hist_planes: Vec<Array4> = (0..cfg.history)
            .map(|k| masks[t.saturating_sub(cfg.history - k)].clone())
            .collect();
        // The background available at time t (updated through t).
        background_step(cfg, &mut bg, &frame, &masks[t]);
        let (instances, pred_frame) = effects_for_records(
            params,
            cfg,
            &masks[t],
            &frame,
            &records,
            &hist_planes,
            ep.actions[t],
            with_frames.then_some(&bg),
        )?;
        out.push(FramePrediction { t, instances, pred_frame });
    }
    Ok(out)
}

/// One autoregressive rollout step's outputs.
#[derive(Clone, Debug)]
pub struct RolloutStep {
    /// Steps ahead of the seed frame (1-based).
    pub offset: usize,
    pub instances: Vec<PredictedInstance>,
    pub pred_frame: Array4,
}

/// Roll the model forward `k` steps from `start_t`, feeding each predicted
/// frame back as the next input. Instances are localized once on the seed
/// frame and advanced by their predicted motions; an instance whose mask
/// support vanishes is dropped.
pub fn rollout(
    params: &ParameterSet,
    cfg: &DynConfig,
    ep: &Episode,
    start_t: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<RolloutStep>> {
    assert!(start_t >= 1, "rollout needs a previous frame for localization");
    assert!(start_t + k <= ep.len_steps(), "not enough actions for the rollout");
    let (h, w) = (ep.frames[0].h, ep.frames[0].w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Warm the background and mask history over the real prefix.
    let mut bg = Array4::zeros([1, 3, h, w]);
    let mut mask_hist: Vec<Array4> = Vec::new();
    let mut masks_cur = Array4::zeros([1, cfg.n_classes(), h, w]);
    for t in 0..=start_t {
        let frame = ep.frames[t].to_array();
        masks_cur = detect_masks_eval(params, cfg, &frame)?;
        background_step(cfg, &mut bg, &frame, &masks_cur);
        mask_hist.push(masks_cur.clone());
    }
    let prev_masks = &mask_hist[mask_hist.len().saturating_sub(2)];
    let mut records = localize_instances(
        prev_masks,
        &masks_cur,
        &ep.frames[start_t - 1].to_array(),
        &ep.frames[start_t].to_array(),
        cfg,
        &mut rng,
    );
    let mut frame_cur = ep.frames[start_t].to_array();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let action = ep.actions[start_t + j];
        let hist_planes: Vec<Array4> = (0..cfg.history)
            .map(|kk| {
                let idx = mask_hist.len() as i64 - 1 - (cfg.history - kk) as i64;
                mask_hist[idx.max(0) as usize].clone()
            })
            .collect();
        let (instances, pred_frame) = effects_for_records(
            params,
            cfg,
            &masks_cur,
            &frame_cur,
            &records,
            &hist_planes,
            action,
            Some(&bg),
        )?;
        let pred_frame = pred_frame.expect("frame compositing requested");
        out.push(RolloutStep { offset: j + 1, instances: instances.clone(), pred_frame: pred_frame.clone() });
        // Advance: predicted frame becomes the next input.
        frame_cur = pred_frame;
        masks_cur = detect_masks_eval(params, cfg, &frame_cur)?;
        background_step(cfg, &mut bg, &frame_cur, &masks_cur);
        mask_hist.push(masks_cur.clone());
        let mut next_records = Vec::new();
        for (rec, inst) in records.iter().zip(&instances) {
            let loc = inst.loc_next;
            let region = RegionBox {
                center: (loc.0.round() as i64, loc.1.round() as i64),
                half: rec.region.half,
                scale: rec.region.scale,
            };
            // Drop instances whose support vanished from the masks.
            let plane = masks_cur.plane(0, rec.class);
            let mass = crate::proposal::box_mass(plane, h, w, &region);
            if mass < 0.5 {
                continue;
            }
            next_records.push(InstanceRecord { class: rec.class, region, loc, mass, score: rec.score });
        }
        records = next_records;
        if records.is_empty() {
            break;
        }
    }
    Ok(out)
}

/// Controllable-agent discovery: the dynamic class whose total effects vary
/// most across actions, accumulated over the evaluated steps. Returns the
/// overall argmax and the per-episode votes.
pub fn discover_agent(
    params: &ParameterSet,
    cfg: &DynConfig,
    episodes: &[Episode],
    seed: u64,
) -> Result<(usize, Vec<usize>)> {
    let mut per_episode = Vec::with_capacity(episodes.len());
    let mut overall = vec![0.0f64; cfg.n_dynamic];
    for (e, ep) in episodes.iter().enumerate() {
        let preds = predict_episode(params, cfg, ep, false, seed ^ (e as u64) << 8)?;
        let mut acc = vec![0.0f64; cfg.n_dynamic];
        for p in &preds {
            for inst in &p.instances {
                // Variance across action columns, summed over both rows.
                let e_mat = &inst.effects;
                let na = cfg.n_actions;
                let mut var = 0.0f64;
                for row in 0..2 {
                    let vals = &e_mat[row * na..(row + 1) * na];
                    let mean = vals.iter().sum::<f32>() as f64 / na as f64;
                    var += vals.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / na as f64;
                }
                acc[inst.class] += var;
            }
        }
        let vote = argmax(&acc);
        per_episode.push(vote);
        for (o, a) in overall.iter_mut().zip(&acc) {
            *o += a;
        }
    }
    Ok((argmax(&overall), per_episode))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        // Ties resolve to the lowest index.
        if v[i] > v[best] + 1e-9 {
            best = i;
        }
    }
    best
}
