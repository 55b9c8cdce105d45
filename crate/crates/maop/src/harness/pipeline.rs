//! Pipeline stages: dataset generation, the three learning levels in order,
//! evaluation, rollout, planning and mask dumps. Stages communicate only
//! through the dataset/output directories, so each is independently
//! resumable.

use super::config::PipelineConfig;
use super::{checkpoint, metrics, storage};
use crate::diffcore::{Array4, ParameterSet};
use crate::dynamics::{self, BackgroundMemory};
use crate::envsim::{self, Episode, LayoutSpec, CANVAS, CLASS_AGENT};
use crate::instanceseg;
use crate::motiondetect::{BackgroundModel, ForegroundMask};
use crate::planner::{self, LearnedModel, PlanReport, RealModel};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const SEG_CKPT: &str = "seg.ckpt";
pub const DYN_CKPT: &str = "dyn.ckpt";

/// Noise protocols for the modular tests that replace a level's input with
/// corrupted ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Noise {
    Gauss,
    Poisson,
}

/// Where a stage's guidance masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    /// The previous pipeline level's output.
    Pipeline,
    /// Ground truth corrupted with the given noise.
    Truth(Noise),
}

impl MaskSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "level1" | "level2" | "pipeline" => Ok(MaskSource::Pipeline),
            "truth-gauss" => Ok(MaskSource::Truth(Noise::Gauss)),
            "truth-poisson" => Ok(MaskSource::Truth(Noise::Poisson)),
            other => Err(Error::Config(format!(
                "unknown mask source {other:?} (pipeline|truth-gauss|truth-poisson)"
            ))),
        }
    }
}

// ── Dataset generation ───────────────────────────────────────────────────

pub fn stage_gen_data(cfg: &PipelineConfig, dataset: &Path) -> Result<()> {
    let (train, test) =
        envsim::make_layout_split(cfg.k_train, cfg.m_test, cfg.env_mode, cfg.seed)?;
    for l in train.iter().chain(&test) {
        storage::save_layout(dataset, l)?;
    }
    let mut write_split = |split: &str, layouts: &[LayoutSpec], frames: usize| -> Result<()> {
        let mut idx = 0usize;
        for (li, layout) in layouts.iter().enumerate() {
            let eps = envsim::episodes_for_layout(
                layout,
                frames,
                cfg.seed ^ ((li as u64 + 1) << 32) ^ if split == "test" { 0x7e57 } else { 0 },
            );
            for ep in eps {
                storage::save_episode(dataset, split, idx, &ep)?;
                idx += 1;
            }
        }
        Ok(())
    };
    write_split("train", &train, cfg.frames_per_layout)?;
    write_split("test", &test, cfg.test_frames_per_layout)?;
    std::fs::write(dataset.join("config_used.cfg"), cfg.to_text())?;
    Ok(())
}

pub fn load_split(dataset: &Path, split: &str) -> Result<Vec<Episode>> {
    let n = storage::episode_count(dataset, split);
    if n == 0 {
        return Err(Error::Dependency(format!(
            "no {split} episodes in {dataset:?}; run `objdyn gen-data` first"
        )));
    }
    (0..n).map(|i| storage::load_episode(dataset, split, i)).collect()
}

// ── Level 1: foreground detection ────────────────────────────────────────

/// Run the background model over one episode's frame stream.
pub fn foreground_for_episode(
    cfg: &PipelineConfig,
    ep: &Episode,
) -> Result<Vec<Option<ForegroundMask>>> {
    let mut model = BackgroundModel::new(CANVAS, CANVAS, cfg.motion.rho);
    let mut out = Vec::with_capacity(ep.frames.len());
    for f in &ep.frames {
        model.update(f)?;
        out.push(model.detect(f, &cfg.motion).ok());
    }
    Ok(out)
}

pub fn stage_detect_fg(cfg: &PipelineConfig, dataset: &Path) -> Result<()> {
    let episodes = load_split(dataset, "train")?;
    for (i, ep) in episodes.iter().enumerate() {
        let fg = foreground_for_episode(cfg, ep)?;
        storage::save_fg_masks(dataset, "train", i, &fg)?;
    }
    Ok(())
}

// ── Ground-truth mask synthesis (modular-test protocols) ────────────────

fn truth_binary_mask(ep: &Episode, t: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; CANVAS * CANVAS];
    for inst in &ep.truth[t] {
        let (r0, c0) = ((inst.row - 1.5).round() as i64, (inst.col - 1.5).round() as i64);
        for r in r0..r0 + 4 {
            for c in c0..c0 + 4 {
                if r >= 0 && r < CANVAS as i64 && c >= 0 && c < CANVAS as i64 {
                    m[r as usize * CANVAS + c as usize] = 1.0;
                }
            }
        }
    }
    m
}

fn apply_noise(mask: &mut [f32], noise: Noise, rng: &mut ChaCha8Rng) {
    match noise {
        Noise::Gauss => {
            // Standard normal added to the raster, clamped back to [0, 1].
            for v in mask.iter_mut() {
                let (u1, u2): (f32, f32) = (rng.gen_range(1e-6..1.0), rng.gen());
                let n = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
                *v = (*v + n).clamp(0.0, 1.0);
            }
        }
        Noise::Poisson => {
            // Poisson-resampled intensities (lambda = pixel value).
            for v in mask.iter_mut() {
                if *v <= 0.0 {
                    continue;
                }
                let lambda = *v;
                let l = (-lambda).exp();
                let mut k = 0u32;
                let mut p = 1.0f32;
                loop {
                    p *= rng.gen::<f32>();
                    if p <= l || k > 16 {
                        break;
                    }
                    k += 1;
                }
                *v = (k as f32).clamp(0.0, 1.0);
            }
        }
    }
}

/// Noise-corrupted ground-truth foreground masks (level-2 independence test).
pub fn truth_foreground(ep: &Episode, noise: Noise, seed: u64) -> Vec<Option<ForegroundMask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..ep.frames.len())
        .map(|t| {
            let mut m = truth_binary_mask(ep, t);
            apply_noise(&mut m, noise, &mut rng);
            let data: Vec<u8> = m.iter().map(|&v| (v >= 0.5) as u8).collect();
            Some(ForegroundMask { h: CANVAS, w: CANVAS, data })
        })
        .collect()
}

/// Noise-corrupted ground-truth instance proposals (dynamics-level
/// independence test): sprites of truth class `c` land on channel `c`.
pub fn truth_proposals(ep: &Episode, n_channels: usize, noise: Option<Noise>, seed: u64) -> Vec<Array4> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..ep.frames.len())
        .map(|t| {
            let mut p = Array4::zeros([1, n_channels, CANVAS, CANVAS]);
            for inst in &ep.truth[t] {
                let ch = inst.class.min(n_channels - 1);
                let (r0, c0) = ((inst.row - 1.5).round() as i64, (inst.col - 1.5).round() as i64);
                for r in r0..r0 + 4 {
                    for c in c0..c0 + 4 {
                        if r >= 0 && r < CANVAS as i64 && c >= 0 && c < CANVAS as i64 {
                            p.plane_mut(0, ch)[r as usize * CANVAS + c as usize] = 1.0;
                        }
                    }
                }
            }
            if let Some(noise) = noise {
                for ch in 0..n_channels {
                    apply_noise(p.plane_mut(0, ch), noise, &mut rng);
                }
            }
            p
        })
        .collect()
}

// ── Level 2: instance segmentation ───────────────────────────────────────

pub fn stage_train_seg(
    cfg: &PipelineConfig,
    dataset: &Path,
    out: &Path,
    fg_source: MaskSource,
) -> Result<Vec<f32>> {
    let episodes = load_split(dataset, "train")?;
    let fg: Vec<Vec<Option<ForegroundMask>>> = match fg_source {
        MaskSource::Pipeline => episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                let masks = storage::load_fg_masks(dataset, "train", i, ep.frames.len())?;
                if masks.iter().all(|m| m.is_none()) {
                    return Err(Error::Dependency(
                        "no foreground masks found; run `objdyn detect-fg` first".into(),
                    ));
                }
                Ok(masks)
            })
            .collect::<Result<_>>()?,
        MaskSource::Truth(noise) => episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| truth_foreground(ep, noise, cfg.seed ^ (i as u64) << 8))
            .collect(),
    };
    let mut params = ParameterSet::new();
    instanceseg::register_seg_params(&mut params, &cfg.seg)?;
    let curve = instanceseg::train_dis(&mut params, &episodes, &fg, &cfg.seg)?;
    checkpoint::save(&out.join(SEG_CKPT), &params, cfg.hash())?;
    // Persist the level's proposals for every training frame.
    for (i, ep) in episodes.iter().enumerate() {
        let proposals = instanceseg::propose_instances(&params, &cfg.seg, ep)?;
        storage::save_proposals(dataset, "train", i, &proposals)?;
    }
    Ok(curve)
}

// ── Level 3: dynamics learning ───────────────────────────────────────────

pub fn stage_train_dyn(
    cfg: &PipelineConfig,
    dataset: &Path,
    out: &Path,
    prop_source: MaskSource,
) -> Result<Vec<f32>> {
    let episodes = load_split(dataset, "train")?;
    let proposals: Vec<Vec<Array4>> = match prop_source {
        MaskSource::Pipeline => episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                storage::load_proposals(dataset, "train", i, ep.frames.len()).map_err(|_| {
                    Error::Dependency(
                        "no instance proposals found; run `objdyn train-seg` first".into(),
                    )
                })
            })
            .collect::<Result<_>>()?,
        MaskSource::Truth(noise) => episodes
            .iter()
            .enumerate()
            .map(|(i, ep)| {
                truth_proposals(ep, cfg.seg.n_merged, Some(noise), cfg.seed ^ (i as u64) << 9)
            })
            .collect(),
    };
    let mut params = ParameterSet::new();
    dynamics::register_dyn_params(&mut params, &cfg.dynamics)?;
    let mut memory = BackgroundMemory::new();
    let curve = dynamics::train_dl(&mut params, &episodes, &proposals, &cfg.dynamics, &mut memory)?;
    checkpoint::save(&out.join(DYN_CKPT), &params, cfg.hash())?;
    Ok(curve)
}

fn load_dyn_params(cfg: &PipelineConfig, out: &Path) -> Result<ParameterSet> {
    let path = out.join(DYN_CKPT);
    if !path.exists() {
        return Err(Error::Dependency(format!(
            "missing {path:?}; run `objdyn train-dyn` first"
        )));
    }
    let (params, hash_ok) = checkpoint::load(&path, cfg.hash())?;
    if !hash_ok {
        eprintln!("warning: checkpoint {path:?} was trained under a different configuration");
    }
    Ok(params)
}

// ── Evaluation ───────────────────────────────────────────────────────────

/// Per-learned-class majority truth class, used to ground agent discovery.
fn learned_to_truth_map(
    preds_by_ep: &[Vec<dynamics::FramePrediction>],
    episodes: &[Episode],
    n_dynamic: usize,
    match_dist: f32,
) -> Vec<Option<usize>> {
    let mut votes = vec![std::collections::BTreeMap::<usize, usize>::new(); n_dynamic];
    for (ep, preds) in episodes.iter().zip(preds_by_ep) {
        for p in preds {
            for inst in &p.instances {
                let nearest = ep.truth[p.t]
                    .iter()
                    .map(|tr| {
                        let d = ((tr.row - inst.loc.0).powi(2) + (tr.col - inst.loc.1).powi(2))
                            .sqrt();
                        (d, tr.class)
                    })
                    .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                if let Some((d, class)) = nearest {
                    if d <= match_dist {
                        *votes[inst.class].entry(class).or_insert(0) += 1;
                    }
                }
            }
        }
    }
    votes
        .into_iter()
        .map(|v| v.into_iter().max_by_key(|&(_, n)| n).map(|(c, _)| c))
        .collect()
}

pub struct EvalOutput {
    pub reports: Vec<metrics::MetricsReport>,
    pub records: Vec<metrics::PredictionRecord>,
}

pub fn evaluate_split(
    cfg: &PipelineConfig,
    params: &ParameterSet,
    episodes: &[Episode],
    split: &str,
    with_frames: bool,
) -> Result<EvalOutput> {
    let mut all_records = Vec::new();
    let mut preds_by_ep = Vec::new();
    let mut rmse_acc = 0.0f64;
    let mut rmse_n = 0usize;
    for (i, ep) in episodes.iter().enumerate() {
        let preds = dynamics::predict_episode(
            params,
            &cfg.dynamics,
            ep,
            with_frames,
            cfg.seed ^ ((i as u64) << 12),
        )?;
        let recs = metrics::match_predictions(i, &preds, &ep.truth, cfg.match_dist);
        all_records.extend(recs);
        if with_frames {
            for p in &preds {
                if let Some(frame) = &p.pred_frame {
                    rmse_acc +=
                        metrics::object_rmse(frame, &ep.frames[p.t + 1], &ep.truth[p.t + 1]) as f64;
                    rmse_n += 1;
                }
            }
        }
        preds_by_ep.push(preds);
    }
    let object_rmse = (rmse_n > 0).then(|| (rmse_acc / rmse_n as f64) as f32);
    let mut report = metrics::MetricsReport::from_records(split, &all_records, object_rmse);
    // Agent discovery, grounded by the learned-class -> truth-class map.
    let class_map =
        learned_to_truth_map(&preds_by_ep, episodes, cfg.dynamics.n_dynamic, cfg.match_dist);
    let (_, votes) = dynamics::discover_agent(params, &cfg.dynamics, episodes, cfg.seed ^ 0xd15c)?;
    let correct = votes
        .iter()
        .filter(|&&v| class_map.get(v).copied().flatten() == Some(CLASS_AGENT))
        .count();
    if !votes.is_empty() {
        report.agent_discovery_accuracy = Some(correct as f32 / votes.len() as f32);
    }
    Ok(EvalOutput { reports: vec![report], records: all_records })
}

pub fn stage_eval(
    cfg: &PipelineConfig,
    dataset: &Path,
    out: &Path,
    with_frames: bool,
) -> Result<Vec<metrics::MetricsReport>> {
    let params = load_dyn_params(cfg, out)?;
    let mut reports = Vec::new();
    let mut records = Vec::new();
    for split in ["train", "test"] {
        let episodes = load_split(dataset, split)?;
        let evaled = evaluate_split(cfg, &params, &episodes, split, with_frames)?;
        reports.extend(evaled.reports);
        records.extend(evaled.records);
    }
    std::fs::create_dir_all(out)?;
    let json = serde_json::json!({
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "reports": reports,
    });
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&json).unwrap())?;
    let mut csv = String::from(metrics::MetricsReport::to_csv_row_header());
    for r in &reports {
        csv.push_str(&r.to_csv_row());
    }
    std::fs::write(out.join("metrics.csv"), csv)?;
    let mut jl = String::new();
    for r in &records {
        jl.push_str(&serde_json::to_string(r).unwrap());
        jl.push('\n');
    }
    std::fs::write(out.join("predictions.jsonl"), jl)?;
    Ok(reports)
}

// ── Planning ─────────────────────────────────────────────────────────────

pub fn stage_plan(
    cfg: &PipelineConfig,
    dataset: &Path,
    out: &Path,
    which: &str,
    episodes_override: Option<usize>,
) -> Result<Vec<(String, PlanReport)>> {
    let layout = storage::load_layout(dataset, "test_00")?;
    let n_eps = episodes_override.unwrap_or(cfg.planner_eval_runs);
    let pcfg = cfg.planner_config();
    let mut results = Vec::new();
    if which == "real" || which == "all" {
        let model = RealModel::new(&layout);
        let report = planner::run_episodes(&layout, n_eps, cfg.seed ^ 0x91a2, |state, seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (state.steps as u64) << 2);
            planner::plan(&model, state, &pcfg, &mut rng).map(|o| o.action).unwrap_or(0)
        });
        results.push(("mcts_real".to_string(), report));
    }
    if which == "learned" || which == "all" {
        let params = load_dyn_params(cfg, out)?;
        let train_eps = load_split(dataset, "train")?;
        let probe: Vec<Episode> = train_eps.into_iter().take(3).collect();
        let (agent_class, _) =
            dynamics::discover_agent(&params, &cfg.dynamics, &probe, cfg.seed ^ 0xd15c)?;
        let hazards_active = !layout.hazard_paths.is_empty();
        let report = learned_plan_episodes(
            cfg, &params, &layout, agent_class, hazards_active, n_eps, &pcfg,
        );
        results.push(("mcts_learned".to_string(), report));
    }
    if which == "random" || which == "all" {
        let report = planner::run_episodes(&layout, n_eps, cfg.seed ^ 0x91a2, |state, seed| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (state.steps as u64) << 2 ^ 0x5555);
            rng.gen_range(0..envsim::N_ACTIONS)
        });
        results.push(("random".to_string(), report));
    }
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("method,reward,win,lose,timeout\n");
    for (name, r) in &results {
        csv.push_str(&format!(
            "{name},{:.4},{:.4},{:.4},{:.4}\n",
            r.mean_reward, r.win_rate, r.lose_rate, r.timeout_rate
        ));
    }
    std::fs::write(out.join("plan_report.csv"), &csv)?;
    let json: serde_json::Value = serde_json::json!({
        "episodes": n_eps,
        "results": results.iter().map(|(n, r)| serde_json::json!({"method": n, "report": r})).collect::<Vec<_>>(),
    });
    std::fs::write(out.join("plan_report.json"), serde_json::to_string_pretty(&json).unwrap())?;
    Ok(results)
}

/// Planning episodes with the learned model: re-observe from the latest two
/// real frames at every step, then search entirely inside the model.
pub fn learned_plan_episodes(
    cfg: &PipelineConfig,
    params: &ParameterSet,
    layout: &LayoutSpec,
    agent_class: usize,
    hazards_active: bool,
    n_episodes: usize,
    pcfg: &planner::PlannerConfig,
) -> PlanReport {
    let mut prev_frame: Option<envsim::Frame> = None;
    let mut last_steps = u32::MAX;
    planner::run_episodes(layout, n_episodes, cfg.seed ^ 0x91a2, |state, seed| {
        if state.steps < last_steps {
            prev_frame = None; // new episode
        }
        last_steps = state.steps;
        let frame = envsim::render(state, layout);
        let prev = prev_frame.clone().unwrap_or_else(|| frame.clone());
        prev_frame = Some(frame.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (state.steps as u64) << 2 ^ 0xaaaa);
        let princess = (state.princess.0 + 1.5, state.princess.1 + 1.5);
        match LearnedModel::observe(
            params,
            &cfg.dynamics,
            &prev,
            &frame,
            agent_class,
            princess,
            hazards_active,
            state.steps,
            state.best_dist,
            &mut rng,
        ) {
            Ok((model, root)) => planner::plan(&model, &root, pcfg, &mut rng)
                .map(|o| o.action)
                .unwrap_or(envsim::ACT_NOOP),
            // Perception failed on this frame: fall back to a random move.
            Err(_) => rng.gen_range(0..envsim::N_ACTIONS),
        }
    })
}

// ── Rollout, discovery, mask dumps ───────────────────────────────────────

pub fn stage_rollout(
    cfg: &PipelineConfig,
    dataset: &Path,
    out: &Path,
    split: &str,
    episode: usize,
    start: usize,
    steps: usize,
) -> Result<Vec<dynamics::RolloutStep>> {
    let params = load_dyn_params(cfg, out)?;
    let ep = storage::load_episode(dataset, split, episode)?;
    let start = start.clamp(1, ep.len_steps().saturating_sub(steps).max(1));
    let rollout = dynamics::rollout(&params, &cfg.dynamics, &ep, start, steps, cfg.seed)?;
    // Strip image: real frames on top, predictions below.
    let dir = out.join("rollout");
    std::fs::create_dir_all(&dir)?;
    let (h, w) = (ep.frames[0].h, ep.frames[0].w);
    let cols = rollout.len() + 1;
    let mut strip = vec![0u8; (2 * h) * (cols * w) * 3];
    let mut put = |row_block: usize, col_block: usize, data: &[u8]| {
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    strip[((row_block * h + r) * cols * w + col_block * w + c) * 3 + ch] =
                        data[(r * w + c) * 3 + ch];
                }
            }
        }
    };
    put(0, 0, &ep.frames[start].data);
    put(1, 0, &ep.frames[start].data);
    for (k, step) in rollout.iter().enumerate() {
        let real = &ep.frames[start + k + 1];
        put(0, k + 1, &real.data);
        let pred: Vec<u8> = {
            let a = &step.pred_frame;
            let mut bytes = vec![0u8; h * w * 3];
            for ch in 0..3 {
                for p in 0..h * w {
                    bytes[p * 3 + ch] = (a.plane(0, ch)[p].clamp(0.0, 1.0) * 255.0) as u8;
                }
            }
            bytes
        };
        put(1, k + 1, &pred);
    }
    image::save_buffer(
        dir.join(format!("{split}_ep{episode:04}_t{start}.png")),
        &strip,
        (cols * w) as u32,
        (2 * h) as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Data(format!("strip write: {e}")))?;
    let locs: Vec<serde_json::Value> = rollout
        .iter()
        .map(|s| {
            serde_json::json!({
                "offset": s.offset,
                "instances": s.instances.iter().map(|i| serde_json::json!({
                    "class": i.class, "row": i.loc_next.0, "col": i.loc_next.1,
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    std::fs::write(
        dir.join(format!("{split}_ep{episode:04}_t{start}.json")),
        serde_json::to_string_pretty(&locs).unwrap(),
    )?;
    Ok(rollout)
}

#[derive(serde::Serialize)]
pub struct DiscoveryReport {
    pub discovered_class: usize,
    pub per_episode: Vec<usize>,
    pub accuracy: Option<f32>,
}

pub fn stage_discover(cfg: &PipelineConfig, dataset: &Path, out: &Path) -> Result<DiscoveryReport> {
    let params = load_dyn_params(cfg, out)?;
    let episodes = load_split(dataset, "test")?;
    let (class, votes) =
        dynamics::discover_agent(&params, &cfg.dynamics, &episodes, cfg.seed ^ 0xd15c)?;
    // Ground the vote with the truth map.
    let preds_by_ep: Vec<_> = episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            dynamics::predict_episode(&params, &cfg.dynamics, ep, false, cfg.seed ^ ((i as u64) << 12))
        })
        .collect::<Result<_>>()?;
    let map = learned_to_truth_map(&preds_by_ep, &episodes, cfg.dynamics.n_dynamic, cfg.match_dist);
    let correct =
        votes.iter().filter(|&&v| map.get(v).copied().flatten() == Some(CLASS_AGENT)).count();
    let report = DiscoveryReport {
        discovered_class: class,
        per_episode: votes.clone(),
        accuracy: (!votes.is_empty()).then(|| correct as f32 / votes.len() as f32),
    };
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("discovery.json"), serde_json::to_string_pretty(&report).unwrap())?;
    Ok(report)
}

pub fn stage_dump_masks(
    cfg: &PipelineConfig,
    dataset: &Path,
    out: &Path,
    split: &str,
    episode: usize,
    t: usize,
) -> Result<()> {
    let ep = storage::load_episode(dataset, split, episode)?;
    let t = t.min(ep.frames.len() - 1);
    let dir = out.join("masks").join(format!("{split}_ep{episode:04}_t{t:04}"));
    std::fs::create_dir_all(&dir)?;
    let save_gray = |path: &Path, plane: &[f32], h: usize, w: usize| -> Result<()> {
        let bytes: Vec<u8> = plane.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0) as u8).collect();
        image::save_buffer(path, &bytes, w as u32, h as u32, image::ColorType::L8)
            .map_err(|e| Error::Data(format!("mask png: {e}")))
    };
    // Foreground, if the stage ran.
    if let Ok(fg) = storage::load_fg_masks(dataset, split, episode, ep.frames.len()) {
        if let Some(Some(m)) = fg.get(t) {
            save_gray(&dir.join("foreground.png"), &m.to_float(), m.h, m.w)?;
        }
    }
    // Segmentation proposals, if present.
    let seg_path = out.join(SEG_CKPT);
    if seg_path.exists() {
        let (params, _) = checkpoint::load(&seg_path, cfg.hash())?;
        let proposals = instanceseg::propose_instances(&params, &cfg.seg, &ep)?;
        for c in 0..proposals[t].c() {
            save_gray(&dir.join(format!("seg_{c}.png")), proposals[t].plane(0, c), CANVAS, CANVAS)?;
        }
    }
    // Object-detector masks, if the dynamics stage ran.
    let dyn_path = out.join(DYN_CKPT);
    if dyn_path.exists() {
        let (params, _) = checkpoint::load(&dyn_path, cfg.hash())?;
        let masks =
            dynamics::detect_masks_eval(&params, &cfg.dynamics, &ep.frames[t].to_array())?;
        for c in 0..masks.c() {
            let kind = if c < cfg.dynamics.n_dynamic { "dyn" } else { "static" };
            save_gray(&dir.join(format!("od_{kind}_{c}.png")), masks.plane(0, c), CANVAS, CANVAS)?;
        }
    }
    Ok(())
}

/// The whole pipeline in order, generating data if absent.
pub fn run_pipeline(cfg: &PipelineConfig, dataset: &Path, out: &Path) -> Result<Vec<metrics::MetricsReport>> {
    if storage::episode_count(dataset, "train") == 0 {
        stage_gen_data(cfg, dataset)?;
    }
    stage_detect_fg(cfg, dataset)?;
    stage_train_seg(cfg, dataset, out, MaskSource::Pipeline)?;
    stage_train_dyn(cfg, dataset, out, MaskSource::Pipeline)?;
    stage_eval(cfg, dataset, out, false)
}
