//! On-disk dataset layout.
//!
//! ```text
//! dataset/
//!   layouts/train_00.txt ...      # text grids
//!   train/ep0000/
//!     meta.json                   # {"layout": "train_00", "seed": ...}
//!     frames/0000.png ...
//!     actions.csv                 # step,action,reward
//!     truth.jsonl                 # one line per frame
//!     fg/0000.png                 # foreground masks (after detect-fg)
//!     proposals/0000.f32          # instance proposals (after train-seg)
//!   test/ep0000/...
//! ```
//!
//! Proposal rasters are raw little-endian float32 with a 12-byte header of
//! three u32 dims (channels, height, width).

use crate::diffcore::Array4;
use crate::envsim::{Episode, Frame, LayoutSpec, TruthInstance};
use crate::motiondetect::ForegroundMask;
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub fn episode_dir(dataset: &Path, split: &str, index: usize) -> PathBuf {
    dataset.join(split).join(format!("ep{index:04}"))
}

pub fn save_layout(dataset: &Path, layout: &LayoutSpec) -> Result<()> {
    let dir = dataset.join("layouts");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{}.txt", layout.name)), layout.to_text())?;
    Ok(())
}

pub fn load_layout(dataset: &Path, name: &str) -> Result<LayoutSpec> {
    let path = dataset.join("layouts").join(format!("{name}.txt"));
    let text = std::fs::read_to_string(&path)
        .map_err(|_| Error::Data(format!("missing layout file {path:?}")))?;
    LayoutSpec::from_text(name, &text)
}

fn save_png_rgb(path: &Path, frame: &Frame) -> Result<()> {
    image::save_buffer(
        path,
        &frame.data,
        frame.w as u32,
        frame.h as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|e| Error::Data(format!("png write {path:?}: {e}")))
}

fn load_png_rgb(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Data(format!("png read {path:?}: {e}")))?;
    let rgb = img.to_rgb8();
    Ok(Frame { h: rgb.height() as usize, w: rgb.width() as usize, data: rgb.into_raw() })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    layout: String,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TruthLine {
    t: usize,
    objects: Vec<TruthInstance>,
}

pub fn save_episode(dataset: &Path, split: &str, index: usize, ep: &Episode) -> Result<()> {
    let dir = episode_dir(dataset, split, index);
    std::fs::create_dir_all(dir.join("frames"))?;
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string(&Meta { layout: ep.layout_name.clone() }).unwrap(),
    )?;
    for (t, f) in ep.frames.iter().enumerate() {
        save_png_rgb(&dir.join("frames").join(format!("{t:04}.png")), f)?;
    }
    let mut csv = String::from("step,action,reward\n");
    for (t, (&a, &r)) in ep.actions.iter().zip(&ep.rewards).enumerate() {
        csv.push_str(&format!("{t},{a},{r}\n"));
    }
    std::fs::write(dir.join("actions.csv"), csv)?;
    let mut jl = String::new();
    for (t, objs) in ep.truth.iter().enumerate() {
        jl.push_str(&serde_json::to_string(&TruthLine { t, objects: objs.clone() }).unwrap());
        jl.push('\n');
    }
    std::fs::write(dir.join("truth.jsonl"), jl)?;
    Ok(())
}

pub fn load_episode(dataset: &Path, split: &str, index: usize) -> Result<Episode> {
    let dir = episode_dir(dataset, split, index);
    let meta: Meta = serde_json::from_str(
        &std::fs::read_to_string(dir.join("meta.json"))
            .map_err(|_| Error::Data(format!("missing episode {dir:?}")))?,
    )
    .map_err(|e| Error::Data(format!("bad meta.json: {e}")))?;
    let mut frames = Vec::new();
    for t in 0.. {
        let p = dir.join("frames").join(format!("{t:04}.png"));
        if !p.exists() {
            break;
        }
        frames.push(load_png_rgb(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("episode {dir:?} has no frames")));
    }
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let csv = std::fs::read_to_string(dir.join("actions.csv"))?;
    for line in csv.lines().skip(1) {
        let mut parts = line.split(',');
        let _step = parts.next();
        let a: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad actions.csv".into()))?;
        let r: f32 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data("bad actions.csv".into()))?;
        actions.push(a);
        rewards.push(r);
    }
    let mut truth = Vec::new();
    for line in std::fs::read_to_string(dir.join("truth.jsonl"))?.lines() {
        let tl: TruthLine =
            serde_json::from_str(line).map_err(|e| Error::Data(format!("bad truth.jsonl: {e}")))?;
        truth.push(tl.objects);
    }
    if actions.len() + 1 != frames.len() || truth.len() != frames.len() {
        return Err(Error::Data(format!("episode {dir:?}: inconsistent lengths")));
    }
    Ok(Episode { layout_name: meta.layout, frames, actions, truth, rewards })
}

/// Number of stored episodes in a split.
pub fn episode_count(dataset: &Path, split: &str) -> usize {
    (0..).take_while(|&i| episode_dir(dataset, split, i).join("meta.json").exists()).count()
}

pub fn save_fg_masks(dataset: &Path, split: &str, index: usize, masks: &[Option<ForegroundMask>]) -> Result<()> {
    let dir = episode_dir(dataset, split, index).join("fg");
    std::fs::create_dir_all(&dir)?;
    for (t, m) in masks.iter().enumerate() {
        let Some(m) = m else { continue };
        let bytes: Vec<u8> = m.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        image::save_buffer(
            dir.join(format!("{t:04}.png")),
            &bytes,
            m.w as u32,
            m.h as u32,
            image::ColorType::L8,
        )
        .map_err(|e| Error::Data(format!("fg png write: {e}")))?;
    }
    Ok(())
}

pub fn load_fg_masks(dataset: &Path, split: &str, index: usize, n_frames: usize) -> Result<Vec<Option<ForegroundMask>>> {
    let dir = episode_dir(dataset, split, index).join("fg");
    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let p = dir.join(format!("{t:04}.png"));
        if !p.exists() {
            out.push(None);
            continue;
        }
        let img = image::open(&p)
            .map_err(|e| Error::Data(format!("fg png read {p:?}: {e}")))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<u8> = img.into_raw().iter().map(|&v| (v > 127) as u8).collect();
        out.push(Some(ForegroundMask { h, w, data }));
    }
    Ok(out)
}

/// Raw float raster: 12-byte dims header (c, h, w as u32 LE) + payload.
pub fn save_f32_raster(path: &Path, a: &Array4) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    let [_, c, h, w] = a.shape();
    for d in [c, h, w] {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in a.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_f32_raster(path: &Path) -> Result<Array4> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::Data(format!("missing raster {path:?}")))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::Data(format!("raster {path:?} too short")));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    const HEADER_BYTES: usize = 12;
    if bytes.len() != HEADER_BYTES + c * h * w * 4 {
        return Err(Error::Data(format!("raster {path:?}: length mismatch")));
    }
    let data: Vec<f32> = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Array4::from_vec([1, c, h, w], data)
}

pub fn save_proposals(dataset: &Path, split: &str, index: usize, proposals: &[Array4]) -> Result<()> {
    let dir = episode_dir(dataset, split, index).join("proposals");
    for (t, p) in proposals.iter().enumerate() {
        save_f32_raster(&dir.join(format!("{t:04}.f32")), p)?;
    }
    Ok(())
}

pub fn load_proposals(dataset: &Path, split: &str, index: usize, n_frames: usize) -> Result<Vec<Array4>> {
    let dir = episode_dir(dataset, split, index).join("proposals");
    let mut out = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        out.push(load_f32_raster(&dir.join(format!("{t:04}.f32")))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_episode, LayoutMode};

    #[test]
    fn episode_round_trip_is_lossless() {
        let dir = std::env::temp_dir().join("objdyn_storage_test");
        std::fs::remove_dir_all(&dir).ok();
        let layout = LayoutSpec::generate("train_00", 5, LayoutMode::Full);
        save_layout(&dir, &layout).unwrap();
        assert_eq!(load_layout(&dir, "train_00").unwrap(), layout);
        let ep = generate_episode(&layout, 11);
        save_episode(&dir, "train", 0, &ep).unwrap();
        let back = load_episode(&dir, "train", 0).unwrap();
        assert_eq!(back.layout_name, ep.layout_name);
        assert_eq!(back.frames, ep.frames);
        assert_eq!(back.actions, ep.actions);
        assert_eq!(back.truth, ep.truth);
        assert_eq!(episode_count(&dir, "train"), 1);
        assert_eq!(episode_count(&dir, "test"), 0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn raster_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("objdyn_raster_test");
        std::fs::remove_dir_all(&dir).ok();
        let a = Array4::from_vec([1, 2, 3, 4], (0..24).map(|i| i as f32 * 0.37 - 1.0).collect())
            .unwrap();
        let p = dir.join("x.f32");
        save_f32_raster(&p, &a).unwrap();
        let b = load_f32_raster(&p).unwrap();
        assert_eq!(a.shape(), b.shape());
        let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb);
        // Truncated raster is rejected.
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_f32_raster(&p).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
