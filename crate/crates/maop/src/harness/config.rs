//! Plain-text `key = value` pipeline configuration.
//!
//! Desk-scale values are the active defaults; the paper-scale counterparts
//! are kept as comments in [`PipelineConfig::to_text`] output.

use crate::dynamics::DynConfig;
use crate::envsim::LayoutMode;
use crate::instanceseg::SegConfig;
use crate::motiondetect::MotionConfig;
use crate::proposal::SamplerConfig;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub seed: u64,
    pub env_mode: LayoutMode,
    /// k-to-m generalization split.
    pub k_train: usize,
    pub m_test: usize,
    /// Frames generated per training layout.
    pub frames_per_layout: usize,
    /// Frames generated per test layout (evaluation only).
    pub test_frames_per_layout: usize,
    pub motion: MotionConfig,
    pub seg: SegConfig,
    pub dynamics: DynConfig,
    /// Maximum prediction-to-truth association distance (pixels).
    pub match_dist: f32,
    pub planner_trajectories: usize,
    pub planner_depth: usize,
    pub planner_uct_c: f32,
    pub planner_rollouts: usize,
    pub planner_eval_runs: usize,
    pub planner_gamma: f32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sampler = SamplerConfig::default();
        PipelineConfig {
            seed: 7,
            env_mode: LayoutMode::Simple,
            k_train: 2,
            m_test: 1,
            frames_per_layout: 1500,
            test_frames_per_layout: 400,
            motion: MotionConfig::default(),
            seg: SegConfig { sampler: sampler.clone(), ..Default::default() },
            dynamics: DynConfig { sampler, ..Default::default() },
            match_dist: 4.0,
            planner_trajectories: 500,
            planner_depth: 6,
            planner_uct_c: 5.0,
            planner_rollouts: 8,
            planner_eval_runs: 21,
            planner_gamma: 1.0,
        }
    }
}

impl PipelineConfig {
    /// Parse the text format; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {k}")))
        }
        let scales = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| p::<usize>("scales", s.trim()))
                .collect::<Result<Vec<_>>>()
        };
        match key {
            "seed" => {
                self.seed = p(key, value)?;
                self.seg.seed = self.seed ^ 0xa5;
                self.dynamics.seed = self.seed ^ 0xb6;
            }
            "env.mode" => self.env_mode = LayoutMode::parse(value)?,
            "env.k_train" => self.k_train = p(key, value)?,
            "env.m_test" => self.m_test = p(key, value)?,
            "env.frames_per_layout" => self.frames_per_layout = p(key, value)?,
            "env.test_frames_per_layout" => self.test_frames_per_layout = p(key, value)?,
            "motion.rho" => self.motion.rho = p(key, value)?,
            "motion.k_sigma" => self.motion.k_sigma = p(key, value)?,
            "motion.min_threshold" => self.motion.min_threshold = p(key, value)?,
            "motion.morph_radius" => self.motion.morph_radius = p(key, value)?,
            "motion.warmup" => self.motion.warmup = p(key, value)?,
            "seg.n_split" => self.seg.n_split = p(key, value)?,
            "seg.n_merged" => self.seg.n_merged = p(key, value)?,
            "seg.lambda_merge" => self.seg.lambda_merge = p(key, value)?,
            "seg.lambda_foreground" => self.seg.lambda_fg = p(key, value)?,
            "seg.static_weight" => self.seg.static_weight = p(key, value)?,
            "seg.sigma_motion" => self.seg.sigma_motion = p(key, value)?,
            "seg.steps" => self.seg.steps = p(key, value)?,
            "seg.batch" => self.seg.batch = p(key, value)?,
            "seg.lr" => self.seg.lr = p(key, value)?,
            "seg.max_boxes_per_channel" => self.seg.max_boxes_per_channel = p(key, value)?,
            "dyn.n_dynamic" => self.dynamics.n_dynamic = p(key, value)?,
            "dyn.n_static" => self.dynamics.n_static = p(key, value)?,
            "dyn.window" => self.dynamics.window = p(key, value)?,
            "dyn.history" => self.dynamics.history = p(key, value)?,
            "dyn.lambda_image" => self.dynamics.lambda_image = p(key, value)?,
            "dyn.lambda_proposal" => self.dynamics.lambda_proposal = p(key, value)?,
            "dyn.alpha_background" => self.dynamics.alpha_bg = p(key, value)?,
            "dyn.steps" => self.dynamics.steps = p(key, value)?,
            "dyn.batch" => self.dynamics.batch = p(key, value)?,
            "dyn.lr" => self.dynamics.lr = p(key, value)?,
            "sampler.scales" => {
                let s = scales(value)?;
                self.seg.sampler.scales = s.clone();
                self.dynamics.sampler.scales = s;
            }
            "sampler.folds" => {
                let f = p(key, value)?;
                self.seg.sampler.folds = f;
                self.dynamics.sampler.folds = f;
            }
            "sampler.mass_threshold" => {
                let v = p(key, value)?;
                self.seg.sampler.mass_threshold = v;
                self.dynamics.sampler.mass_threshold = v;
            }
            "sampler.iou_threshold" => {
                let v = p(key, value)?;
                self.seg.sampler.iou_threshold = v;
                self.dynamics.sampler.iou_threshold = v;
            }
            "sampler.max_instances" => {
                let v = p(key, value)?;
                self.seg.sampler.max_instances = v;
                self.dynamics.sampler.max_instances = v;
            }
            "sampler.combine_fraction" => {
                let v = p(key, value)?;
                self.seg.sampler.combine_fraction = v;
                self.dynamics.sampler.combine_fraction = v;
            }
            "eval.match_dist" => self.match_dist = p(key, value)?,
            "planner.trajectories" => self.planner_trajectories = p(key, value)?,
            "planner.depth" => self.planner_depth = p(key, value)?,
            "planner.uct_c" => self.planner_uct_c = p(key, value)?,
            "planner.rollouts" => self.planner_rollouts = p(key, value)?,
            "planner.eval_runs" => self.planner_eval_runs = p(key, value)?,
            "planner.gamma" => self.planner_gamma = p(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_train == 0 || self.m_test == 0 {
            return Err(Error::Config("need k_train >= 1 and m_test >= 1".into()));
        }
        if self.dynamics.window % 2 == 0 {
            return Err(Error::Config("dyn.window must be odd".into()));
        }
        self.seg.sampler.validate()?;
        self.dynamics.sampler.validate()?;
        if self.seg.n_merged > self.dynamics.n_dynamic {
            return Err(Error::Config(
                "seg.n_merged must not exceed dyn.n_dynamic (proposal channels feed the detector)".into(),
            ));
        }
        Ok(())
    }

    /// Render the full configuration, with the paper-scale values recorded in
    /// comments next to the desk-scale actives.
    pub fn to_text(&self) -> String {
        let s = self;
        let scales =
            s.seg.sampler.scales.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "# Pipeline configuration (desk scale). Paper-scale values noted per key.\n\
             seed = {}\n\
             \n\
             env.mode = {}                  # simple | full\n\
             env.k_train = {}\n\
             env.m_test = {}\n\
             env.frames_per_layout = {}\n\
             env.test_frames_per_layout = {}\n\
             \n\
             motion.rho = {}\n\
             motion.k_sigma = {}\n\
             motion.min_threshold = {}\n\
             motion.morph_radius = {}\n\
             motion.warmup = {}\n\
             \n\
             seg.n_split = {}               # 8 at paper scale\n\
             seg.n_merged = {}              # 5 at paper scale\n\
             seg.lambda_merge = {}          # lambda_3 = 10\n\
             seg.lambda_foreground = {}     # lambda_4 = 10\n\
             seg.static_weight = {}         # zero-motion static channel weight = 100\n\
             seg.sigma_motion = {}\n\
             seg.steps = {}                 # 1e5 at paper scale\n\
             seg.batch = {}                 # batch size 8\n\
             seg.lr = {}                    # Adam 1e-3\n\
             seg.max_boxes_per_channel = {}\n\
             \n\
             dyn.n_dynamic = {}             # 5 at paper scale\n\
             dyn.n_static = {}              # 8 at paper scale\n\
             dyn.window = {}                # horizon w = 33 at paper scale\n\
             dyn.history = {}\n\
             dyn.lambda_image = {}          # lambda_1 = 100\n\
             dyn.lambda_proposal = {}       # lambda_2 = 1\n\
             dyn.alpha_background = {}      # decay 0.9\n\
             dyn.steps = {}                 # 5e4 at paper scale\n\
             dyn.batch = {}\n\
             dyn.lr = {}\n\
             \n\
             sampler.scales = {}            # 10,20,40,80 at paper scale (160x160)\n\
             sampler.folds = {}\n\
             sampler.mass_threshold = {}\n\
             sampler.iou_threshold = {}\n\
             sampler.max_instances = {}     # 6 at paper scale\n\
             sampler.combine_fraction = {}\n\
             \n\
             eval.match_dist = {}\n\
             \n\
             planner.trajectories = {}      # 500\n\
             planner.depth = {}             # 6\n\
             planner.uct_c = {}             # 5\n\
             planner.rollouts = {}          # 8\n\
             planner.eval_runs = {}         # 21 runs\n\
             planner.gamma = {}\n",
            s.seed,
            s.env_mode.as_str(),
            s.k_train,
            s.m_test,
            s.frames_per_layout,
            s.test_frames_per_layout,
            s.motion.rho,
            s.motion.k_sigma,
            s.motion.min_threshold,
            s.motion.morph_radius,
            s.motion.warmup,
            s.seg.n_split,
            s.seg.n_merged,
            s.seg.lambda_merge,
            s.seg.lambda_fg,
            s.seg.static_weight,
            s.seg.sigma_motion,
            s.seg.steps,
            s.seg.batch,
            s.seg.lr,
            s.seg.max_boxes_per_channel,
            s.dynamics.n_dynamic,
            s.dynamics.n_static,
            s.dynamics.window,
            s.dynamics.history,
            s.dynamics.lambda_image,
            s.dynamics.lambda_proposal,
            s.dynamics.alpha_bg,
            s.dynamics.steps,
            s.dynamics.batch,
            s.dynamics.lr,
            scales,
            s.seg.sampler.folds,
            s.seg.sampler.mass_threshold,
            s.seg.sampler.iou_threshold,
            s.seg.sampler.max_instances,
            s.seg.sampler.combine_fraction,
            s.match_dist,
            s.planner_trajectories,
            s.planner_depth,
            s.planner_uct_c,
            s.planner_rollouts,
            s.planner_eval_runs,
            s.planner_gamma,
        )
    }

    /// FNV-1a hash of the normalized configuration, stored in checkpoints.
    pub fn hash(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    pub fn planner_config(&self) -> crate::planner::PlannerConfig {
        crate::planner::PlannerConfig {
            n_trajectories: self.planner_trajectories,
            max_depth: self.planner_depth,
            uct_c: self.planner_uct_c,
            n_rollouts: self.planner_rollouts,
            n_actions: self.dynamics.n_actions,
            gamma: self.planner_gamma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_preserves_values() {
        let mut cfg = PipelineConfig::default();
        cfg.seg.steps = 123;
        cfg.dynamics.lambda_image = 42.0;
        let text = cfg.to_text();
        let back = PipelineConfig::from_text(&text).unwrap();
        assert_eq!(back.seg.steps, 123);
        assert_eq!(back.dynamics.lambda_image, 42.0);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_text("bogus.key = 3\n").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = PipelineConfig::from_text("# c\n\nseed = 9 # trailing\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn paper_loss_weights_are_the_defaults() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.dynamics.lambda_image, 100.0);
        assert_eq!(cfg.dynamics.lambda_proposal, 1.0);
        assert_eq!(cfg.seg.lambda_merge, 10.0);
        assert_eq!(cfg.seg.lambda_fg, 10.0);
        assert_eq!(cfg.seg.static_weight, 100.0);
        assert_eq!(cfg.dynamics.alpha_bg, 0.9);
        assert_eq!(cfg.seg.batch, 8);
        assert_eq!(cfg.dynamics.batch, 8);
        assert_eq!(cfg.seg.lr, 1e-3);
        assert_eq!((cfg.planner_trajectories, cfg.planner_depth), (500, 6));
        assert_eq!((cfg.planner_uct_c, cfg.planner_rollouts), (5.0, 8));
        assert_eq!(cfg.planner_eval_runs, 21);
    }
}
