//! Region-proposal sampling, expected-location/translation estimation,
//! motion-consistency discrepancy scoring and NMS-based instance selection.
//!
//! Shared by the instance segmentation level (where the discrepancy drives
//! training through the tape) and the dynamics level (where the plain-raster
//! versions score and select localized instances).

use crate::diffcore::{Array4, Tape, Var};
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Axis-aligned box around an integer center pixel with inclusive
/// half-extents, so its sides are `2*half + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegionBox {
    pub center: (i64, i64),
    pub half: (i64, i64),
    pub scale: usize,
}

impl RegionBox {
    pub fn sides(&self) -> (usize, usize) {
        ((2 * self.half.0 + 1) as usize, (2 * self.half.1 + 1) as usize)
    }

    pub fn top_left(&self) -> (i64, i64) {
        (self.center.0 - self.half.0, self.center.1 - self.half.1)
    }

    pub fn contains(&self, r: i64, c: i64) -> bool {
        (r - self.center.0).abs() <= self.half.0 && (c - self.center.1).abs() <= self.half.1
    }

    /// Inclusive pixel bounds clipped to an `h x w` canvas, or `None` if the
    /// box lies fully outside.
    pub fn clipped(&self, h: usize, w: usize) -> Option<(usize, usize, usize, usize)> {
        let r0 = (self.center.0 - self.half.0).max(0);
        let r1 = (self.center.0 + self.half.0).min(h as i64 - 1);
        let c0 = (self.center.1 - self.half.1).max(0);
        let c1 = (self.center.1 + self.half.1).min(w as i64 - 1);
        if r0 > r1 || c0 > c1 {
            None
        } else {
            Some((r0 as usize, r1 as usize, c0 as usize, c1 as usize))
        }
    }

    /// Intersection-over-union of the clipped pixel sets.
    pub fn iou(&self, other: &RegionBox, h: usize, w: usize) -> f32 {
        let (Some(a), Some(b)) = (self.clipped(h, w), other.clipped(h, w)) else {
            return 0.0;
        };
        let ir0 = a.0.max(b.0);
        let ir1 = a.1.min(b.1);
        let ic0 = a.2.max(b.2);
        let ic1 = a.3.min(b.3);
        if ir0 > ir1 || ic0 > ic1 {
            return 0.0;
        }
        let inter = ((ir1 - ir0 + 1) * (ic1 - ic0 + 1)) as f32;
        let area = |x: (usize, usize, usize, usize)| ((x.1 - x.0 + 1) * (x.3 - x.2 + 1)) as f32;
        inter / (area(a) + area(b) - inter)
    }
}

/// Sampler knobs. Scales are nominal box sizes; each scale's half-extent is
/// `scale / 2`.
#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub scales: Vec<usize>,
    /// Folds of full coverage per scale.
    pub folds: usize,
    /// Minimum mask mass inside a box for it to count as an instance.
    pub mass_threshold: f32,
    /// Greedy NMS overlap limit.
    pub iou_threshold: f32,
    /// Per-class instance cap.
    pub max_instances: usize,
    /// Mask binarization threshold.
    pub bin_threshold: f32,
    /// Fraction of extra double-size proposals added by [`pair_combine`].
    pub combine_fraction: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            scales: vec![4, 8, 16, 24],
            folds: 2,
            mass_threshold: 2.0,
            iou_threshold: 0.3,
            max_instances: 4,
            bin_threshold: 0.5,
            combine_fraction: 0.25,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("proposal scales must be ascending and non-empty".into()));
        }
        if self.folds == 0 {
            return Err(Error::Config("coverage folds must be >= 1".into()));
        }
        Ok(())
    }
}

/// Multi-fold full-coverage sampling: binarize the mask, then per scale and
/// fold repeatedly pick an uncovered on-pixel uniformly, emit its box and
/// remove the pixels it covers, until none remain.
pub fn sample_regions(
    mask: &[f32],
    h: usize,
    w: usize,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<RegionBox> {
    let on: Vec<usize> = (0..h * w).filter(|&p| mask[p] >= config.bin_threshold).collect();
    let mut out = Vec::new();
    if on.is_empty() {
        return out;
    }
    for (si, &scale) in config.scales.iter().enumerate() {
        let half = (scale / 2) as i64;
        for _ in 0..config.folds {
            let mut candidates = on.clone();
            while !candidates.is_empty() {
                let pick = candidates[rng.gen_range(0..candidates.len())];
                let center = ((pick / w) as i64, (pick % w) as i64);
                let b = RegionBox { center, half: (half, half), scale: si };
                // The center pixel is on, so the box is never empty.
                out.push(b);
                candidates.retain(|&p| !b.contains((p / w) as i64, (p % w) as i64));
            }
        }
    }
    out
}

/// Augment a proposal set with double-size boxes built from random pairs
/// (the union bounding box, sides kept odd). Used only while training the
/// instance splitter.
pub fn pair_combine(
    proposals: &[RegionBox],
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<RegionBox> {
    let mut out = Vec::new();
    if proposals.len() < 2 {
        return out;
    }
    let n_extra = ((proposals.len() as f32) * config.combine_fraction).round() as usize;
    for _ in 0..n_extra {
        let a = proposals[rng.gen_range(0..proposals.len())];
        let b = proposals[rng.gen_range(0..proposals.len())];
        let r0 = (a.center.0 - a.half.0).min(b.center.0 - b.half.0);
        let r1 = (a.center.0 + a.half.0).max(b.center.0 + b.half.0);
        let c0 = (a.center.1 - a.half.1).min(b.center.1 - b.half.1);
        let c1 = (a.center.1 + a.half.1).max(b.center.1 + b.half.1);
        // Square cover of the union bounding box (window crops are square),
        // expanded to odd sides so the center stays on the pixel grid.
        let half = ((r1 - r0) / 2 + (r1 - r0) % 2).max((c1 - c0) / 2 + (c1 - c0) % 2);
        out.push(RegionBox {
            center: ((r0 + r1) / 2, (c0 + c1) / 2),
            half: (half, half),
            scale: a.scale.max(b.scale),
        });
    }
    out
}

/// Mask mass inside a box (zero outside the canvas).
pub fn box_mass(mask: &[f32], h: usize, w: usize, b: &RegionBox) -> f32 {
    let Some((r0, r1, c0, c1)) = b.clipped(h, w) else {
        return 0.0;
    };
    let mut s = 0.0;
    for r in r0..=r1 {
        for c in c0..=c1 {
            s += mask[r * w + c];
        }
    }
    s
}

/// Probability-weighted mean coordinate of a raster mask.
pub fn expected_location(mask: &[f32], h: usize, w: usize) -> Result<(f32, f32)> {
    let mass: f32 = mask.iter().sum();
    if mass <= 1e-8 {
        return Err(Error::Numeric("expected_location: zero-mass mask".into()));
    }
    let mut su = 0.0;
    let mut sv = 0.0;
    for r in 0..h {
        for c in 0..w {
            su += r as f32 * mask[r * w + c];
            sv += c as f32 * mask[r * w + c];
        }
    }
    Ok((su / mass, sv / mass))
}

fn masked_centroid_in_box(mask: &[f32], h: usize, w: usize, b: &RegionBox) -> Option<(f32, f32)> {
    let (r0, r1, c0, c1) = b.clipped(h, w)?;
    let mut mass = 0.0;
    let mut su = 0.0;
    let mut sv = 0.0;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let m = mask[r * w + c];
            mass += m;
            su += r as f32 * m;
            sv += c as f32 * m;
        }
    }
    if mass <= 1e-6 {
        None
    } else {
        Some((su / mass, sv / mass))
    }
}

/// Average rigid translation of the masked content inside a fixed box between
/// two steps: centroid displacement. Returns `(translation, degenerate)`;
/// degenerate means one side had no usable mass.
pub fn estimate_translation(
    mask_t: &[f32],
    mask_t1: &[f32],
    h: usize,
    w: usize,
    b: &RegionBox,
) -> ((f32, f32), bool) {
    match (masked_centroid_in_box(mask_t, h, w, b), masked_centroid_in_box(mask_t1, h, w, b)) {
        (Some(a), Some(bb)) => ((bb.0 - a.0, bb.1 - a.1), false),
        _ => ((0.0, 0.0), true),
    }
}

fn crop_masked_rgb(frame: &Array4, mask: &[f32], b: &RegionBox) -> Vec<f32> {
    let (h, w) = (frame.h(), frame.w());
    let (bh, bw) = b.sides();
    let (tr, tc) = b.top_left();
    let mut out = vec![0.0f32; 3 * bh * bw];
    for ch in 0..3 {
        for i in 0..bh {
            let r = tr + i as i64;
            if r < 0 || r >= h as i64 {
                continue;
            }
            for j in 0..bw {
                let c = tc + j as i64;
                if c < 0 || c >= w as i64 {
                    continue;
                }
                out[(ch * bh + i) * bw + j] =
                    frame.at(0, ch, r as usize, c as usize) * mask[r as usize * w + c as usize];
            }
        }
    }
    out
}

fn shift_plane_bilinear(src: &[f32], h: usize, w: usize, dr: f32, dc: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for u in 0..h {
        for v in 0..w {
            out[u * w + v] =
                crate::diffcore::bilerp_zero(src, h, w, u as f32 - dr, v as f32 - dc);
        }
    }
    out
}

/// Motion-consistency score of a box: estimate the average translation of the
/// masked content, warp the previous masked pixels by it, and compare with the
/// next masked pixels (`l2^2 / box area`). Near zero iff the box holds a
/// single rigid instance. Returns `(score, degenerate)`.
pub fn discrepancy(
    frame_t: &Array4,
    frame_t1: &Array4,
    mask_t: &[f32],
    mask_t1: &[f32],
    b: &RegionBox,
) -> (f32, bool) {
    let (h, w) = (frame_t.h(), frame_t.w());
    let ((dr, dc), degenerate) = estimate_translation(mask_t, mask_t1, h, w, b);
    if degenerate {
        return (0.0, true);
    }
    let (bh, bw) = b.sides();
    let content_t = crop_masked_rgb(frame_t, mask_t, b);
    let content_t1 = crop_masked_rgb(frame_t1, mask_t1, b);
    let mut score = 0.0f32;
    for ch in 0..3 {
        let plane = &content_t[ch * bh * bw..(ch + 1) * bh * bw];
        let warped = shift_plane_bilinear(plane, bh, bw, dr, dc);
        let target = &content_t1[ch * bh * bw..(ch + 1) * bh * bw];
        for (a, t) in warped.iter().zip(target) {
            score += (a - t) * (a - t);
        }
    }
    (score / (bh * bw) as f32, false)
}

/// Tape version of [`discrepancy`] used as the instance-level training loss:
/// differentiable w.r.t. both masks through the translation estimate and the
/// warp. The caller must have checked that both sides of the box carry mass.
pub fn discrepancy_on_tape(
    t: &mut Tape,
    frame_t: Var,
    frame_t1: Var,
    mask_t: Var,
    mask_t1: Var,
    b: &RegionBox,
) -> Result<Var> {
    let (bh, bw) = b.sides();
    if bh != bw {
        return Err(Error::Config("tape discrepancy needs square boxes".into()));
    }
    let center = t.constant(Array4::vec2(b.center.0 as f32, b.center.1 as f32));
    let m_t = t.crop_window(mask_t, center, bh)?;
    let m_t1 = t.crop_window(mask_t1, center, bh)?;
    let loc_t = t.expected_loc(m_t)?;
    let loc_t1 = t.expected_loc(m_t1)?;
    let translation = t.sub(loc_t1, loc_t);
    let masked_t = t.mul_bcast_c(frame_t, mask_t);
    let masked_t1 = t.mul_bcast_c(frame_t1, mask_t1);
    let content_t = t.crop_window(masked_t, center, bh)?;
    let content_t1 = t.crop_window(masked_t1, center, bh)?;
    let warped = t.bilinear_warp(content_t, translation);
    let diff = t.sub(warped, content_t1);
    let sq = t.mul(diff, diff);
    let total = t.sum_all(sq);
    Ok(t.scale(total, 1.0 / (bh * bw) as f32))
}

/// One scored proposal ready for selection.
#[derive(Clone, Copy, Debug)]
pub struct ScoredBox {
    pub region: RegionBox,
    pub score: f32,
    pub mass: f32,
    pub degenerate: bool,
}

/// Screen proposals down to high-consistency, non-overlapping, non-empty
/// instances: drop sub-mass or degenerate boxes, sort ascending by
/// discrepancy (ties: larger mass, then lower row/col), then greedy NMS up to
/// the per-class cap. Returns indices into `scored`.
///
/// Overlap is the IoU of the binarized mask content inside each box, not of
/// the rectangles: boxes of different scales around the same instance carry
/// the same content and must suppress each other.
pub fn select_instances(
    scored: &[ScoredBox],
    mask: &[f32],
    h: usize,
    w: usize,
    config: &SamplerConfig,
) -> Vec<usize> {
    let content: Vec<Vec<u32>> = scored
        .iter()
        .map(|s| {
            let mut px = Vec::new();
            if let Some((r0, r1, c0, c1)) = s.region.clipped(h, w) {
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        if mask[r * w + c] >= config.bin_threshold {
                            px.push((r * w + c) as u32);
                        }
                    }
                }
            }
            px
        })
        .collect();
    let content_iou = |a: &[u32], b: &[u32]| -> f32 {
        if a.is_empty() || b.is_empty() {
            return 0.0;
        }
        let mut inter = 0usize;
        let (mut i, mut j) = (0usize, 0usize);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    inter += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        inter as f32 / (a.len() + b.len() - inter) as f32
    };
    let mut order: Vec<usize> = (0..scored.len())
        .filter(|&i| !scored[i].degenerate && scored[i].mass > config.mass_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&scored[a], &scored[b]);
        sa.score
            .partial_cmp(&sb.score)
            .unwrap()
            .then(sb.mass.partial_cmp(&sa.mass).unwrap())
            .then(sa.region.center.cmp(&sb.region.center))
    });
    let mut picked: Vec<usize> = Vec::new();
    for i in order {
        if picked.len() >= config.max_instances {
            break;
        }
        if picked
            .iter()
            .all(|&p| content_iou(&content[p], &content[i]) <= config.iou_threshold)
        {
            picked.push(i);
        }
    }
    picked
}
