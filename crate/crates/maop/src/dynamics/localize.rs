//! Dynamic-instance localization on detached mask rasters, and the greedy
//! class-wise matching between consecutive steps.

use super::DynConfig;
use crate::diffcore::Array4;
use crate::proposal::{self, RegionBox, ScoredBox};
use rand_chacha::ChaCha8Rng;

/// One localized dynamic instance at a given time step.
#[derive(Clone, Debug)]
pub struct InstanceRecord {
    /// Dynamic class index (mask channel).
    pub class: usize,
    pub region: RegionBox,
    /// Centroid of the class mask inside the box, full-frame pixels.
    pub loc: (f32, f32),
    pub mass: f32,
    pub score: f32,
}

/// Localize instances on the current dynamic masks. Motion-consistency scores
/// come from the `(previous, current)` frame pair, so localization never sees
/// the future.
///
/// `d_prev`/`d_cur` are `[1, n_dynamic, H, W]` detached mask rasters.
pub fn localize_instances(
    d_prev: &Array4,
    d_cur: &Array4,
    frame_prev: &Array4,
    frame_cur: &Array4,
    cfg: &DynConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<InstanceRecord> {
    let (h, w) = (d_cur.h(), d_cur.w());
    let mut out = Vec::new();
    for class in 0..cfg.n_dynamic {
        let cur = d_cur.plane(0, class);
        let prev = d_prev.plane(0, class);
        let boxes = proposal::sample_regions(cur, h, w, &cfg.sampler, rng);
        if boxes.is_empty() {
            continue;
        }
        let scored: Vec<ScoredBox> = boxes
            .iter()
            .map(|b| {
                let (score, degenerate) = proposal::discrepancy(frame_prev, frame_cur, prev, cur, b);
                ScoredBox { region: *b, score, mass: proposal::box_mass(cur, h, w, b), degenerate }
            })
            .collect();
        for idx in proposal::select_instances(&scored, cur, h, w, &cfg.sampler) {
            let s = &scored[idx];
            // Mass is above the selection threshold, so the centroid exists.
            let Some(loc) = masked_centroid(cur, h, w, &s.region) else { continue };
            out.push(InstanceRecord {
                class,
                region: s.region,
                loc,
                mass: s.mass,
                score: s.score,
            });
        }
    }
    out
}

fn masked_centroid(mask: &[f32], h: usize, w: usize, b: &RegionBox) -> Option<(f32, f32)> {
    let (r0, r1, c0, c1) = b.clipped(h, w)?;
    let (mut m, mut su, mut sv) = (0.0f32, 0.0f32, 0.0f32);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let v = mask[r * w + c];
            m += v;
            su += r as f32 * v;
            sv += c as f32 * v;
        }
    }
    if m <= 1e-6 {
        None
    } else {
        Some((su / m, sv / m))
    }
}

/// Greedy same-class nearest-neighbor matching, capped at `max_dist` pixels.
/// Returns `(from_index, to_index)` pairs.
pub fn match_instances(
    from: &[InstanceRecord],
    to: &[InstanceRecord],
    max_dist: f32,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
    for (i, a) in from.iter().enumerate() {
        for (j, b) in to.iter().enumerate() {
            if a.class != b.class {
                continue;
            }
            let d = ((a.loc.0 - b.loc.0).powi(2) + (a.loc.1 - b.loc.1).powi(2)).sqrt();
            if d <= max_dist {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_from = vec![false; from.len()];
    let mut used_to = vec![false; to.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_from[i] && !used_to[j] {
            used_from[i] = true;
            used_to[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const H: usize = 48;

    fn masks_with(sprites: &[(usize, usize, usize)]) -> Array4 {
        // (class, r0, c0) of 4x4 blocks.
        let mut m = Array4::zeros([1, 3, H, H]);
        for &(class, r0, c0) in sprites {
            for r in r0..r0 + 4 {
                for c in c0..c0 + 4 {
                    m.set(0, class, r, c, 1.0);
                }
            }
        }
        m
    }

    fn frame_from_masks(m: &Array4) -> Array4 {
        let mut f = Array4::filled([1, 3, H, H], 0.1);
        for class in 0..m.c() {
            for r in 0..H {
                for c in 0..H {
                    if m.at(0, class, r, c) > 0.5 {
                        f.set(0, class.min(2), r, c, 0.9);
                    }
                }
            }
        }
        f
    }

    #[test]
    fn perfect_masks_localize_each_sprite_once() {
        let cfg = DynConfig::default();
        let prev = masks_with(&[(0, 20, 8), (1, 20, 28), (1, 36, 36)]);
        let cur = masks_with(&[(0, 20, 12), (1, 20, 30), (1, 36, 34)]);
        let fp = frame_from_masks(&prev);
        let fc = frame_from_masks(&cur);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let recs = localize_instances(&prev, &cur, &fp, &fc, &cfg, &mut rng);
        assert_eq!(recs.len(), 3, "one record per sprite: {recs:?}");
        assert_eq!(recs.iter().filter(|r| r.class == 0).count(), 1);
        assert_eq!(recs.iter().filter(|r| r.class == 1).count(), 2);
        // Locations sit on the sprite centroids.
        let agent = recs.iter().find(|r| r.class == 0).unwrap();
        assert!((agent.loc.0 - 21.5).abs() < 0.51 && (agent.loc.1 - 13.5).abs() < 0.51);
    }

    #[test]
    fn static_scene_still_localizes_zero_motion_instances() {
        let cfg = DynConfig::default();
        let m = masks_with(&[(0, 20, 20)]);
        let f = frame_from_masks(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let recs = localize_instances(&m, &m, &f, &f, &cfg, &mut rng);
        assert_eq!(recs.len(), 1);
        assert!(recs[0].score < 1e-6);
    }

    #[test]
    fn matching_is_class_aware_and_greedy_by_distance() {
        let mk = |class: usize, loc: (f32, f32)| InstanceRecord {
            class,
            region: RegionBox { center: (loc.0 as i64, loc.1 as i64), half: (4, 4), scale: 0 },
            loc,
            mass: 16.0,
            score: 0.0,
        };
        let from = vec![mk(0, (10.0, 10.0)), mk(1, (10.0, 12.0)), mk(1, (30.0, 30.0))];
        let to = vec![mk(1, (11.0, 12.0)), mk(0, (10.0, 14.0)), mk(1, (42.0, 30.0))];
        let pairs = match_instances(&from, &to, 7.5);
        // Class 0 matches class 0 despite the nearer class-1 record; the far
        // hazard pair exceeds the cap and stays unmatched.
        assert!(pairs.contains(&(0, 1)));
        assert!(pairs.contains(&(1, 0)));
        assert_eq!(pairs.len(), 2);
    }
}
