//! Level 1: unsupervised foreground detection by running-average background
//! subtraction, producing coarse dynamic-region masks for the instance
//! segmentation level.

use crate::envsim::Frame;
use crate::{Error, Result};

/// Tunables for the background model and the detector.
#[derive(Clone, Debug)]
pub struct MotionConfig {
    /// Running-average learning rate.
    pub rho: f32,
    /// Deviation multiplier for the per-channel threshold.
    pub k_sigma: f32,
    /// Threshold floor, on the 0-255 scale.
    pub min_threshold: f32,
    /// Radius of the morphological open + close cleanup.
    pub morph_radius: usize,
    /// Frames required before detection is considered ready.
    pub warmup: u32,
}

impl Default for MotionConfig {
    fn default() -> Self {
        // k_sigma is tuned for flat-color sprites on patrol loops: pixels a
        // hazard revisits periodically have deviation ~0.375x the color step,
        // so multipliers above ~2 push the threshold past the signal itself.
        MotionConfig { rho: 0.05, k_sigma: 1.5, min_threshold: 10.0, morph_radius: 1, warmup: 20 }
    }
}

/// Per-pixel running mean and absolute deviation over RGB.
#[derive(Clone, Debug)]
pub struct BackgroundModel {
    h: usize,
    w: usize,
    mean: Vec<f32>,
    deviation: Vec<f32>,
    pub frames_seen: u32,
    pub rho: f32,
}

/// Binary per-pixel foreground mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForegroundMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl ForegroundMask {
    pub fn empty(h: usize, w: usize) -> Self {
        ForegroundMask { h, w, data: vec![0; h * w] }
    }

    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.w + col] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Float raster in `[0,1]` for the proposal sampler.
    pub fn to_float(&self) -> Vec<f32> {
        self.data.iter().map(|&v| if v != 0 { 1.0 } else { 0.0 }).collect()
    }
}

impl BackgroundModel {
    pub fn new(h: usize, w: usize, rho: f32) -> Self {
        BackgroundModel {
            h,
            w,
            mean: vec![0.0; h * w * 3],
            deviation: vec![0.0; h * w * 3],
            frames_seen: 0,
            rho,
        }
    }

    /// Blend one frame into the running statistics:
    /// `mean <- (1-rho)*mean + rho*frame`, deviation updated analogously from
    /// `|frame - mean|`. The first frame initializes the mean directly.
    pub fn update(&mut self, frame: &Frame) -> Result<()> {
        if frame.h != self.h || frame.w != self.w {
            return Err(Error::Shape("frame does not match background model dims".into()));
        }
        if self.frames_seen == 0 {
            for (m, &p) in self.mean.iter_mut().zip(&frame.data) {
                *m = p as f32;
            }
        } else {
            for i in 0..self.mean.len() {
                let p = frame.data[i] as f32;
                let d = (p - self.mean[i]).abs();
                self.mean[i] = (1.0 - self.rho) * self.mean[i] + self.rho * p;
                self.deviation[i] = (1.0 - self.rho) * self.deviation[i] + self.rho * d;
            }
        }
        self.frames_seen += 1;
        Ok(())
    }

    pub fn ready(&self, warmup: u32) -> bool {
        self.frames_seen >= warmup
    }

    pub fn mean_rgb(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.w + col) * 3;
        [self.mean[i], self.mean[i + 1], self.mean[i + 2]]
    }

    /// Flag pixels deviating from the background, then clean up with a
    /// morphological open + close.
    pub fn detect(&self, frame: &Frame, cfg: &MotionConfig) -> Result<ForegroundMask> {
        if !self.ready(cfg.warmup) {
            return Err(Error::NotReady(format!(
                "background model has seen {} frames, warmup needs {}",
                self.frames_seen, cfg.warmup
            )));
        }
        if frame.h != self.h || frame.w != self.w {
            return Err(Error::Shape("frame does not match background model dims".into()));
        }
        let mut mask = ForegroundMask::empty(self.h, self.w);
        for p in 0..self.h * self.w {
            let mut fg = false;
            for ch in 0..3 {
                let i = p * 3 + ch;
                let thresh = (cfg.k_sigma * self.deviation[i]).max(cfg.min_threshold);
                if (frame.data[i] as f32 - self.mean[i]).abs() > thresh {
                    fg = true;
                    break;
                }
            }
            mask.data[p] = fg as u8;
        }
        if cfg.morph_radius > 0 {
            mask = erode(&mask, cfg.morph_radius);
            mask = dilate(&mask, cfg.morph_radius);
            mask = dilate(&mask, cfg.morph_radius);
            mask = erode(&mask, cfg.morph_radius);
        }
        Ok(mask)
    }
}

fn dilate(mask: &ForegroundMask, radius: usize) -> ForegroundMask {
    let mut out = ForegroundMask::empty(mask.h, mask.w);
    let r = radius as i64;
    for row in 0..mask.h as i64 {
        for col in 0..mask.w as i64 {
            let mut any = false;
            'scan: for dr in -r..=r {
                for dc in -r..=r {
                    let (y, x) = (row + dr, col + dc);
                    if y >= 0
                        && y < mask.h as i64
                        && x >= 0
                        && x < mask.w as i64
                        && mask.at(y as usize, x as usize)
                    {
                        any = true;
                        break 'scan;
                    }
                }
            }
            out.data[(row as usize) * mask.w + col as usize] = any as u8;
        }
    }
    out
}

fn erode(mask: &ForegroundMask, radius: usize) -> ForegroundMask {
    let mut out = ForegroundMask::empty(mask.h, mask.w);
    let r = radius as i64;
    for row in 0..mask.h as i64 {
        for col in 0..mask.w as i64 {
            let mut all = true;
            'scan: for dr in -r..=r {
                for dc in -r..=r {
                    let (y, x) = (row + dr, col + dc);
                    let v = y >= 0
                        && y < mask.h as i64
                        && x >= 0
                        && x < mask.w as i64
                        && mask.at(y as usize, x as usize);
                    if !v {
                        all = false;
                        break 'scan;
                    }
                }
            }
            out.data[(row as usize) * mask.w + col as usize] = all as u8;
        }
    }
    out
}

/// 4-connected components of a binary mask; returns (label map, count) with
/// labels starting at 1. Used by tests and mask-quality oracles.
pub fn connected_components(mask: &[f32], h: usize, w: usize, thresh: f32) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask[start] <= thresh || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (row, col) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask[q] > thresh && labels[q] == 0 {
                    labels[q] = next;
                    stack.push(q);
                }
            };
            if row > 0 {
                visit(p - w);
            }
            if row + 1 < h {
                visit(p + w);
            }
            if col > 0 {
                visit(p - 1);
            }
            if col + 1 < w {
                visit(p + 1);
            }
        }
    }
    (labels, next as usize)
}
