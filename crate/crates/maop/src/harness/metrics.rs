//! Prediction metrics: n-error accuracy, object RMSE, motion RMSE, and the
//! aggregated report.

use crate::diffcore::Array4;
use crate::dynamics::FramePrediction;
use crate::envsim::{Frame, TruthInstance, CELL_PX};

/// One matched (or missed) truth instance at one step: everything needed to
/// recompute the location metrics offline.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct PredictionRecord {
    pub episode: usize,
    pub t: usize,
    /// Ground-truth class (0 = agent).
    pub class: usize,
    pub truth_id: usize,
    pub truth_now: (f32, f32),
    pub truth_next: (f32, f32),
    /// Matched model prediction of the next location, if any.
    pub pred_next: Option<(f32, f32)>,
    pub motion_pred: Option<(f32, f32)>,
    pub motion_truth: (f32, f32),
}

/// Associate model predictions with ground truth, step by step. Every truth
/// instance yields a record; unmatched ones count as misses in the metrics.
pub fn match_predictions(
    episode_idx: usize,
    preds: &[FramePrediction],
    truth: &[Vec<TruthInstance>],
    match_dist: f32,
) -> Vec<PredictionRecord> {
    let mut out = Vec::new();
    for p in preds {
        let t = p.t;
        let now = &truth[t];
        let next = &truth[t + 1];
        // Greedy nearest association between truth instances and predictions.
        let mut cands: Vec<(f32, usize, usize)> = Vec::new();
        for (ti, tr) in now.iter().enumerate() {
            for (pi, pr) in p.instances.iter().enumerate() {
                let d = ((tr.row - pr.loc.0).powi(2) + (tr.col - pr.loc.1).powi(2)).sqrt();
                if d <= match_dist {
                    cands.push((d, ti, pi));
                }
            }
        }
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut truth_match: Vec<Option<usize>> = vec![None; now.len()];
        let mut used_pred = vec![false; p.instances.len()];
        for (_, ti, pi) in cands {
            if truth_match[ti].is_none() && !used_pred[pi] {
                truth_match[ti] = Some(pi);
                used_pred[pi] = true;
            }
        }
        for (ti, tr) in now.iter().enumerate() {
            // The same physical instance one step later.
            let Some(nx) = next.iter().find(|n| n.class == tr.class && n.id == tr.id) else {
                continue;
            };
            let matched = truth_match[ti].map(|pi| &p.instances[pi]);
            out.push(PredictionRecord {
                episode: episode_idx,
                t,
                class: tr.class,
                truth_id: tr.id,
                truth_now: (tr.row, tr.col),
                truth_next: (nx.row, nx.col),
                pred_next: matched.map(|m| m.loc_next),
                motion_pred: matched.map(|m| m.motion),
                motion_truth: (nx.row - tr.row, nx.col - tr.col),
            });
        }
    }
    out
}

/// Fraction of records whose predicted next location lies within `n + 0.5`
/// pixels of the truth. Misses count against the accuracy. `None` when no
/// records qualify.
pub fn n_error_accuracy(records: &[PredictionRecord], class: Option<usize>, n: f32) -> Option<f32> {
    let mut total = 0usize;
    let mut hit = 0usize;
    for r in records {
        if class.is_some_and(|c| r.class != c) {
            continue;
        }
        total += 1;
        if let Some(p) = r.pred_next {
            let d = ((p.0 - r.truth_next.0).powi(2) + (p.1 - r.truth_next.1).powi(2)).sqrt();
            if d <= n + 0.5 {
                hit += 1;
            }
        }
    }
    (total > 0).then(|| hit as f32 / total as f32)
}

/// RMSE between predicted and true per-step motions, in pixels, over matched
/// records.
pub fn motion_rmse(records: &[PredictionRecord], class: Option<usize>) -> Option<f32> {
    let mut n = 0usize;
    let mut acc = 0.0f64;
    for r in records {
        if class.is_some_and(|c| r.class != c) {
            continue;
        }
        let Some(m) = r.motion_pred else { continue };
        acc += ((m.0 - r.motion_truth.0).powi(2) + (m.1 - r.motion_truth.1).powi(2)) as f64;
        n += 1;
    }
    (n > 0).then(|| ((acc / n as f64).sqrt()) as f32)
}

/// RMSE on the 0-255 scale over pixels near the dynamic objects: each truth
/// sprite's cell dilated by two pixels.
pub fn object_rmse(pred: &Array4, truth_frame: &Frame, truth_next: &[TruthInstance]) -> f32 {
    let (h, w) = (truth_frame.h, truth_frame.w);
    let mut in_region = vec![false; h * w];
    let half = CELL_PX as i64 / 2 + 2;
    for inst in truth_next {
        let (cr, cc) = (inst.row.round() as i64, inst.col.round() as i64);
        for r in (cr - half).max(0)..=(cr + half).min(h as i64 - 1) {
            for c in (cc - half).max(0)..=(cc + half).min(w as i64 - 1) {
                in_region[r as usize * w + c as usize] = true;
            }
        }
    }
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for p in 0..h * w {
        if !in_region[p] {
            continue;
        }
        for ch in 0..3 {
            let pv = (pred.plane(0, ch)[p].clamp(0.0, 1.0) * 255.0) as f64;
            let tv = truth_frame.data[p * 3 + ch] as f64;
            acc += (pv - tv) * (pv - tv);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        ((acc / n as f64).sqrt()) as f32
    }
}

/// Aggregated metrics for one split.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MetricsReport {
    pub split: String,
    pub records: usize,
    pub agent_acc: [Option<f32>; 3],
    pub all_acc: [Option<f32>; 3],
    pub motion_rmse_all: Option<f32>,
    pub motion_rmse_agent: Option<f32>,
    pub object_rmse: Option<f32>,
    pub agent_discovery_accuracy: Option<f32>,
}

impl MetricsReport {
    pub fn from_records(split: &str, records: &[PredictionRecord], object_rmse: Option<f32>) -> Self {
        let acc = |class: Option<usize>| {
            [
                n_error_accuracy(records, class, 0.0),
                n_error_accuracy(records, class, 1.0),
                n_error_accuracy(records, class, 2.0),
            ]
        };
        MetricsReport {
            split: split.to_string(),
            records: records.len(),
            agent_acc: acc(Some(crate::envsim::CLASS_AGENT)),
            all_acc: acc(None),
            motion_rmse_all: motion_rmse(records, None),
            motion_rmse_agent: motion_rmse(records, Some(crate::envsim::CLASS_AGENT)),
            object_rmse,
            agent_discovery_accuracy: None,
        }
    }

    pub fn to_csv_row_header() -> &'static str {
        "split,records,agent_0acc,agent_1acc,agent_2acc,all_0acc,all_1acc,all_2acc,motion_rmse_all,motion_rmse_agent,object_rmse,agent_discovery\n"
    }

    pub fn to_csv_row(&self) -> String {
        fn opt(v: Option<f32>) -> String {
            v.map(|x| format!("{x:.4}")).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.split,
            self.records,
            opt(self.agent_acc[0]),
            opt(self.agent_acc[1]),
            opt(self.agent_acc[2]),
            opt(self.all_acc[0]),
            opt(self.all_acc[1]),
            opt(self.all_acc[2]),
            opt(self.motion_rmse_all),
            opt(self.motion_rmse_agent),
            opt(self.object_rmse),
            opt(self.agent_discovery_accuracy),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(class: usize, pred: Option<(f32, f32)>, truth: (f32, f32)) -> PredictionRecord {
        PredictionRecord {
            episode: 0,
            t: 1,
            class,
            truth_id: 0,
            truth_now: (0.0, 0.0),
            truth_next: truth,
            pred_next: pred,
            motion_pred: pred.map(|p| (p.0 - 0.0, p.1)),
            motion_truth: truth,
        }
    }

    #[test]
    fn exact_prediction_counts_at_zero_error() {
        let r = vec![rec(0, Some((3.0, 4.0)), (3.0, 4.0))];
        assert_eq!(n_error_accuracy(&r, None, 0.0), Some(1.0));
    }

    #[test]
    fn distance_two_counts_at_n2_not_n1() {
        let r = vec![rec(0, Some((2.0, 0.0)), (0.0, 0.0))];
        assert_eq!(n_error_accuracy(&r, None, 1.0), Some(0.0));
        assert_eq!(n_error_accuracy(&r, None, 2.0), Some(1.0));
    }

    #[test]
    fn misses_count_against_accuracy_and_empty_is_undefined() {
        let r = vec![rec(0, None, (0.0, 0.0)), rec(0, Some((0.0, 0.0)), (0.0, 0.0))];
        assert_eq!(n_error_accuracy(&r, None, 0.0), Some(0.5));
        assert_eq!(n_error_accuracy(&[], None, 0.0), None);
        // Class filter that matches nothing is also undefined.
        assert_eq!(n_error_accuracy(&r, Some(9), 0.0), None);
    }

    #[test]
    fn motion_rmse_of_perfect_motion_is_zero() {
        let mut r = rec(0, Some((3.0, 4.0)), (3.0, 4.0));
        r.motion_pred = Some(r.motion_truth);
        assert_eq!(motion_rmse(&[r], None), Some(0.0));
    }

    #[test]
    fn object_rmse_identical_and_saturated_frames() {
        let truth = Frame { h: 16, w: 16, data: vec![100; 16 * 16 * 3] };
        let mut pred = Array4::zeros([1, 3, 16, 16]);
        for v in pred.data_mut() {
            *v = 100.0 / 255.0;
        }
        let insts =
            vec![TruthInstance { class: 0, id: 0, row: 8.0, col: 8.0 }];
        let rmse = object_rmse(&pred, &truth, &insts);
        assert!(rmse < 0.51, "quantization only: {rmse}");
        // All-max disagreement saturates at 255.
        let black = Frame { h: 16, w: 16, data: vec![0; 16 * 16 * 3] };
        let mut white = Array4::zeros([1, 3, 16, 16]);
        for v in white.data_mut() {
            *v = 1.0;
        }
        let rmse = object_rmse(&white, &black, &insts);
        assert!((rmse - 255.0).abs() < 1e-3);
    }
}
