//! Level 3: object-oriented dynamics learning.
//!
//! An object detector decomposes each frame into soft class masks (dynamic
//! channels first, static channels last). Dynamic instances are localized by
//! proposal sampling + discrepancy selection; per instance, relation nets read
//! tailored crops of all object masks around it and an inertia net reads its
//! own mask history, their effects summing to an action-conditioned motion.
//! Predicted frames composite warped instances over an exponentially updated
//! background memory.

mod eval;
mod localize;
mod model;
mod train;

pub use eval::{discover_agent, predict_episode, rollout, FramePrediction, PredictedInstance, RolloutStep};
pub use localize::{localize_instances, match_instances, InstanceRecord};
pub use model::{background_update, compose_motion_value, detect_masks_eval, detect_objects, instances_forward, InstanceVars};
pub use train::{train_dl, BackgroundMemory, DlBreakdown};

use crate::diffcore::ParameterSet;
use crate::nets;
use crate::proposal::SamplerConfig;
use crate::Result;

/// Hyperparameters of the dynamics level.
#[derive(Clone, Debug)]
pub struct DynConfig {
    /// Dynamic object classes (first mask channels).
    pub n_dynamic: usize,
    /// Static object classes (remaining channels).
    pub n_static: usize,
    pub n_actions: usize,
    /// Horizon window side for the tailored crops (odd).
    pub window: usize,
    /// History length: the inertia net sees `history + 1` crops.
    pub history: usize,
    /// Image prediction loss weight (lambda_1).
    pub lambda_image: f32,
    /// Proposal loss weight (lambda_2).
    pub lambda_proposal: f32,
    /// Background memory decay rate.
    pub alpha_bg: f32,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for DynConfig {
    fn default() -> Self {
        DynConfig {
            n_dynamic: 3,
            n_static: 4,
            n_actions: 6,
            window: 15,
            history: 3,
            lambda_image: 100.0,
            lambda_proposal: 1.0,
            alpha_bg: 0.9,
            steps: 5000,
            batch: 8,
            lr: 1e-3,
            sampler: SamplerConfig::default(),
            seed: 2,
        }
    }
}

impl DynConfig {
    pub fn n_classes(&self) -> usize {
        self.n_dynamic + self.n_static
    }
}

pub const OD_PREFIX: &str = "od";

pub fn rn_prefix(class: usize, object: usize) -> String {
    format!("rn.{class}.{object}")
}

pub fn in_prefix(class: usize) -> String {
    format!("in.{class}")
}

/// Register the object detector, one relation net per (dynamic class, object
/// class) pair, and one inertia net per dynamic class.
pub fn register_dyn_params(params: &mut ParameterSet, cfg: &DynConfig) -> Result<()> {
    nets::register_mask_head(params, cfg.seed ^ 0x0d, OD_PREFIX, 3, cfg.n_classes())?;
    for ci in 0..cfg.n_dynamic {
        for j in 0..cfg.n_classes() {
            nets::register_effect_net(
                params,
                cfg.seed ^ (0x1000 + (ci * 97 + j) as u64),
                &rn_prefix(ci, j),
                3,
                cfg.window,
                cfg.n_actions,
            )?;
        }
        nets::register_effect_net(
            params,
            cfg.seed ^ (0x2000 + ci as u64),
            &in_prefix(ci),
            cfg.history + 1,
            cfg.window,
            cfg.n_actions,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_creates_nd_times_no_relation_nets() {
        let cfg = DynConfig::default();
        let mut params = ParameterSet::new();
        register_dyn_params(&mut params, &cfg).unwrap();
        let rn_count = (0..cfg.n_dynamic)
            .flat_map(|c| (0..cfg.n_classes()).map(move |j| (c, j)))
            .filter(|(c, j)| params.index_of(&format!("rn.{c}.{j}.c1.w")).is_some())
            .count();
        assert_eq!(rn_count, cfg.n_dynamic * cfg.n_classes());
        for c in 0..cfg.n_dynamic {
            assert!(params.index_of(&format!("in.{c}.c1.w")).is_some());
        }
        // Relation nets share the architecture but not the weights.
        let a = params.get("rn.0.0.c1.w").unwrap();
        let b = params.get("rn.0.1.c1.w").unwrap();
        assert_eq!(a.shape(), b.shape());
        assert_ne!(a.data(), b.data());
    }
}
