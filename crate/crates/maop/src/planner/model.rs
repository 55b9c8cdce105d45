//! The two model backends the planner can search in: the true simulator and
//! the learned object-level dynamics.

use super::DynamicsModel;
use crate::diffcore::{Array4, ParameterSet, Tape};
use crate::dynamics::{localize_instances, match_instances, DynConfig, InstanceRecord};
use crate::envsim::{self, EnvState, Frame, LayoutSpec};
use crate::nets::Binder;
use crate::proposal::RegionBox;
use crate::Result;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::HashMap;

/// Ground-truth simulator backend.
pub struct RealModel<'a> {
    layout: &'a LayoutSpec,
}

impl<'a> RealModel<'a> {
    pub fn new(layout: &'a LayoutSpec) -> Self {
        RealModel { layout }
    }
}

impl DynamicsModel for RealModel<'_> {
    type State = EnvState;

    fn step(&self, state: &Self::State, action: usize) -> (Self::State, f32, bool) {
        let next = envsim::step(state, self.layout, action);
        let reward = envsim::reward(state, &next);
        let terminal = next.outcome.is_some();
        (next, reward, terminal)
    }
}

/// One tracked instance inside the learned model's imagination: its soft mask
/// plane plus the recent plane history for the inertia net.
#[derive(Clone)]
pub struct LearnedInstance {
    pub class: usize,
    pub loc: (f32, f32),
    /// `history + 1` lifted mask planes, oldest first; the last is current.
    planes: Vec<Vec<f32>>,
}

/// Search state of the learned model.
#[derive(Clone)]
pub struct LearnedState {
    pub instances: Vec<LearnedInstance>,
    /// Index of the controllable instance.
    pub agent: usize,
    pub steps: u32,
    pub best_dist: f32,
    pub done: bool,
}

/// Learned-dynamics backend: instances advance by the effect nets' motions,
/// masks are maintained by warping, and the provided true reward function
/// runs on the predicted locations.
pub struct LearnedModel<'a> {
    params: &'a ParameterSet,
    cfg: &'a DynConfig,
    pub agent_class: usize,
    princess: (f32, f32),
    /// Whether hazard contact terminates episodes in this environment.
    hazards_active: bool,
    /// Static mask channels from the root observation, `[1, n_static, H, W]`.
    static_planes: Array4,
    h: usize,
    w: usize,
    /// Quantized-situation -> effect-matrix cache. Purely an evaluation
    /// shortcut: identical queries recur constantly inside the search tree.
    cache: RefCell<HashMap<u64, Vec<f32>>>,
}

fn fnv1a(acc: u64, v: i64) -> u64 {
    let mut h = acc;
    for b in v.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn q(v: f32) -> i64 {
    (v * 4.0).round() as i64
}

impl<'a> LearnedModel<'a> {
    /// Build the model and its root state from the two most recent real
    /// frames. The princess location and the reward rules come from the true
    /// environment, per the planning protocol.
    #[allow(clippy::too_many_arguments)]
    pub fn observe(
        params: &'a ParameterSet,
        cfg: &'a DynConfig,
        frame_prev: &Frame,
        frame_cur: &Frame,
        agent_class: usize,
        princess: (f32, f32),
        hazards_active: bool,
        env_steps: u32,
        best_dist: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Self, LearnedState)> {
        let (h, w) = (frame_cur.h, frame_cur.w);
        let fp = frame_prev.to_array();
        let fc = frame_cur.to_array();
        let masks_prev = crate::dynamics::detect_masks_eval(params, cfg, &fp)?;
        let masks_cur = crate::dynamics::detect_masks_eval(params, cfg, &fc)?;
        let records = localize_instances(&masks_prev, &masks_cur, &fp, &fc, cfg, rng);
        let prev_records = localize_instances(&masks_prev, &masks_prev, &fp, &fp, cfg, rng);
        let pairs = match_instances(&records, &prev_records, cfg.window as f32);
        let mut instances = Vec::new();
        for (i, rec) in records.iter().enumerate() {
            let cur_plane = lift_plane(&masks_cur, rec);
            let prev_plane = pairs
                .iter()
                .find(|&&(a, _)| a == i)
                .map(|&(_, j)| lift_plane(&masks_prev, &prev_records[j]))
                .unwrap_or_else(|| cur_plane.clone());
            let mut planes = vec![prev_plane; cfg.history];
            planes.push(cur_plane);
            instances.push(LearnedInstance { class: rec.class, loc: rec.loc, planes });
        }
        // The controllable instance: largest mass among the agent class.
        let agent = instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| inst.class == agent_class)
            .max_by(|a, b| {
                let ma: f32 = a.1.planes.last().unwrap().iter().sum();
                let mb: f32 = b.1.planes.last().unwrap().iter().sum();
                ma.partial_cmp(&mb).unwrap()
            })
            .map(|(i, _)| i)
            .ok_or_else(|| {
                crate::Error::NotReady("no controllable instance localized in the frame".into())
            })?;
        let mut static_planes = Array4::zeros([1, cfg.n_static, h, w]);
        for s in 0..cfg.n_static {
            static_planes
                .plane_mut(0, s)
                .copy_from_slice(masks_cur.plane(0, cfg.n_dynamic + s));
        }
        let state = LearnedState { instances, agent, steps: env_steps, best_dist, done: false };
        let model = LearnedModel {
            params,
            cfg,
            agent_class,
            princess,
            hazards_active,
            static_planes,
            h,
            w,
            cache: RefCell::new(HashMap::new()),
        };
        Ok((model, state))
    }

    /// Rebuild the full mask raster for a state: dynamic channels are the
    /// sums of their instances' planes, statics come from the observation.
    fn masks_for(&self, state: &LearnedState) -> Array4 {
        let mut masks = Array4::zeros([1, self.cfg.n_classes(), self.h, self.w]);
        for inst in &state.instances {
            let dst = masks.plane_mut(0, inst.class);
            for (d, s) in dst.iter_mut().zip(inst.planes.last().unwrap()) {
                *d += s;
            }
        }
        for s in 0..self.cfg.n_static {
            masks
                .plane_mut(0, self.cfg.n_dynamic + s)
                .copy_from_slice(self.static_planes.plane(0, s));
        }
        masks
    }

    fn situation_key(&self, state: &LearnedState, idx: usize) -> u64 {
        let inst = &state.instances[idx];
        let mut key = fnv1a(0xcbf2_9ce4_8422_2325, inst.class as i64);
        key = fnv1a(key, q(inst.loc.0));
        key = fnv1a(key, q(inst.loc.1));
        // Relative positions of the other instances.
        let mut rels: Vec<(i64, i64, i64)> = state
            .instances
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != idx)
            .map(|(_, o)| (o.class as i64, q(o.loc.0 - inst.loc.0), q(o.loc.1 - inst.loc.1)))
            .collect();
        rels.sort_unstable();
        for (c, dr, dc) in rels {
            key = fnv1a(key, c);
            key = fnv1a(key, dr);
            key = fnv1a(key, dc);
        }
        // History signature: centroid offsets of the past planes.
        for p in &inst.planes {
            let mass: f32 = p.iter().sum();
            if mass <= 1e-6 {
                key = fnv1a(key, -1_000_000);
                continue;
            }
            let mut su = 0.0f32;
            let mut sv = 0.0f32;
            for r in 0..self.h {
                for c in 0..self.w {
                    let v = p[r * self.w + c];
                    su += r as f32 * v;
                    sv += c as f32 * v;
                }
            }
            key = fnv1a(key, q(su / mass - inst.loc.0));
            key = fnv1a(key, q(sv / mass - inst.loc.1));
        }
        key
    }

    /// Effect matrices for every instance (cached by quantized situation).
    fn effects(&self, state: &LearnedState) -> Result<Vec<Vec<f32>>> {
        let mut out: Vec<Option<Vec<f32>>> = vec![None; state.instances.len()];
        let mut missing = Vec::new();
        for i in 0..state.instances.len() {
            let key = self.situation_key(state, i);
            if let Some(e) = self.cache.borrow().get(&key) {
                out[i] = Some(e.clone());
            } else {
                missing.push((i, key));
            }
        }
        if !missing.is_empty() {
            let masks = self.masks_for(state);
            let mut tape = Tape::new();
            let mut binder = Binder::new(self.params, false);
            let masks_var = tape.constant(masks);
            let mut inputs = Vec::new();
            let mut histories = Vec::new();
            let mut actions = Vec::new();
            for &(i, _) in &missing {
                let inst = &state.instances[i];
                let rec = InstanceRecord {
                    class: inst.class,
                    region: RegionBox {
                        center: (inst.loc.0.round() as i64, inst.loc.1.round() as i64),
                        half: (3, 3),
                        scale: 0,
                    },
                    loc: inst.loc,
                    mass: inst.planes.last().unwrap().iter().sum(),
                    score: 0.0,
                };
                inputs.push((masks_var, rec));
                // Past planes cropped at the current location, oldest first.
                let mut hist = Array4::zeros([1, self.cfg.history, self.cfg.window, self.cfg.window]);
                for k in 0..self.cfg.history {
                    let crop = crop_plane_at(
                        &inst.planes[k],
                        self.h,
                        self.w,
                        inst.loc,
                        self.cfg.window,
                    );
                    hist.plane_mut(0, k).copy_from_slice(&crop);
                }
                histories.push(hist);
                actions.push(0);
            }
            let vars = crate::dynamics::instances_forward(
                &mut tape,
                &mut binder,
                self.params,
                self.cfg,
                &inputs,
                &histories,
                &actions,
            )?;
            for ((i, key), v) in missing.iter().zip(&vars) {
                let e = tape.value(v.e_total).data().to_vec();
                self.cache.borrow_mut().insert(*key, e.clone());
                out[*i] = Some(e);
            }
        }
        Ok(out.into_iter().map(|o| o.unwrap()).collect())
    }
}

fn lift_plane(masks: &Array4, rec: &InstanceRecord) -> Vec<f32> {
    let (h, w) = (masks.h(), masks.w());
    let mut plane = vec![0.0f32; h * w];
    if let Some((r0, r1, c0, c1)) = rec.region.clipped(h, w) {
        let src = masks.plane(0, rec.class);
        for r in r0..=r1 {
            for c in c0..=c1 {
                plane[r * w + c] = src[r * w + c];
            }
        }
    }
    plane
}

fn crop_plane_at(plane: &[f32], h: usize, w: usize, center: (f32, f32), size: usize) -> Vec<f32> {
    let off = (size as f32 - 1.0) / 2.0;
    let mut out = vec![0.0f32; size * size];
    for i in 0..size {
        for j in 0..size {
            out[i * size + j] = crate::diffcore::bilerp_zero(
                plane,
                h,
                w,
                center.0 - off + i as f32,
                center.1 - off + j as f32,
            );
        }
    }
    out
}

fn warp_plane(plane: &[f32], h: usize, w: usize, dr: f32, dc: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for u in 0..h {
        for v in 0..w {
            out[u * w + v] =
                crate::diffcore::bilerp_zero(plane, h, w, u as f32 - dr, v as f32 - dc);
        }
    }
    out
}

fn touch(a: (f32, f32), b: (f32, f32)) -> bool {
    (a.0 - b.0).abs() < envsim::CELL_PX as f32 && (a.1 - b.1).abs() < envsim::CELL_PX as f32
}

impl DynamicsModel for LearnedModel<'_> {
    type State = LearnedState;

    fn step(&self, state: &Self::State, action: usize) -> (Self::State, f32, bool) {
        if state.done {
            return (state.clone(), 0.0, true);
        }
        let mut next = state.clone();
        next.steps += 1;
        let effects = match self.effects(state) {
            Ok(e) => e,
            Err(_) => {
                // Degenerate masks: freeze the imagination.
                next.done = true;
                return (next, 0.0, true);
            }
        };
        let na = self.cfg.n_actions;
        for (inst, e) in next.instances.iter_mut().zip(&effects) {
            let (dr, dc) = (e[action], e[na + action]);
            inst.loc = (inst.loc.0 + dr, inst.loc.1 + dc);
            let warped = warp_plane(inst.planes.last().unwrap(), self.h, self.w, dr, dc);
            inst.planes.remove(0);
            inst.planes.push(warped);
        }
        // True reward rules on the predicted locations.
        let agent = next.instances[next.agent].loc;
        let dist =
            ((agent.0 - self.princess.0).powi(2) + (agent.1 - self.princess.1).powi(2)).sqrt();
        let mut reward = (next.best_dist - dist).max(0.0);
        next.best_dist = next.best_dist.min(dist);
        let mut terminal = false;
        if touch(agent, self.princess) {
            reward += 5.0;
            terminal = true;
        } else if self.hazards_active {
            for (i, inst) in next.instances.iter().enumerate() {
                if i != next.agent && inst.class != self.agent_class && touch(agent, inst.loc) {
                    reward -= 5.0;
                    terminal = true;
                    break;
                }
            }
        }
        if next.steps >= envsim::EPISODE_CAP {
            terminal = true;
        }
        next.done = terminal;
        (next, reward, terminal)
    }
}
