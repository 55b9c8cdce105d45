//! Binary checkpoint format.
//!
//! Layout: magic `MAOP1`, format version (u16), config hash (u64), entry
//! count (u32); then per entry: name length (u16) + UTF-8 name, dtype code
//! (u8, 0 = f32), trainable flag (u8), rank (u8, always 4), four u32 dims,
//! and the little-endian f32 payload. Save/load round-trips bit-exactly.

use crate::diffcore::{Array4, ParameterSet};
use crate::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"MAOP1";
const VERSION: u16 = 1;

pub fn save(path: &Path, params: &ParameterSet, config_hash: u64) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&config_hash.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(0); // dtype f32
        buf.push(p.trainable as u8);
        buf.push(4); // rank
        for d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint. A config-hash mismatch is reported through the returned
/// flag (the caller decides whether to warn); corruption is a hard error.
pub fn load(path: &Path, expected_hash: u64) -> Result<(ParameterSet, bool)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if at + n > bytes.len() {
            return Err(Error::Data(format!("checkpoint {path:?} is truncated")));
        }
        let s = &bytes[at..at + n];
        at += n;
        Ok(s)
    };
    if take(5)? != MAGIC {
        return Err(Error::Data(format!("checkpoint {path:?}: bad magic")));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Data(format!("checkpoint {path:?}: unsupported version {version}")));
    }
    let hash = u64::from_le_bytes(take(8)?.try_into().unwrap());
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| Error::Data("checkpoint: invalid parameter name".into()))?;
        let dtype = take(1)?[0];
        if dtype != 0 {
            return Err(Error::Data(format!("checkpoint: unknown dtype {dtype}")));
        }
        let trainable = take(1)?[0] != 0;
        let rank = take(1)?[0];
        if rank != 4 {
            return Err(Error::Data(format!("checkpoint: unsupported rank {rank}")));
        }
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        }
        let len: usize = shape.iter().product();
        let raw = take(len * 4)?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params.insert(&name, Array4::from_vec(shape, data)?, trainable)?;
    }
    if at != bytes.len() {
        return Err(Error::Data(format!("checkpoint {path:?}: trailing bytes")));
    }
    Ok((params, hash == expected_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("a.w", Array4::from_vec([2, 3, 1, 1], vec![1.5, -0.25, 3.0, 0.0, 9.75, -8.5]).unwrap(), true)
            .unwrap();
        p.insert("a.rm", Array4::filled([1, 3, 1, 1], 0.125), false).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = std::env::temp_dir().join("objdyn_ckpt_test");
        let path = dir.join("t.ckpt");
        let params = sample_params();
        save(&path, &params, 42).unwrap();
        let (back, hash_ok) = load(&path, 42).unwrap();
        assert!(hash_ok);
        assert_eq!(back.len(), params.len());
        for (a, b) in params.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value.shape(), b.value.shape());
            let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        // Hash mismatch is reported, not fatal.
        let (_, ok) = load(&path, 43).unwrap();
        assert!(!ok);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn truncation_and_bad_magic_are_hard_errors() {
        let dir = std::env::temp_dir().join("objdyn_ckpt_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        save(&path, &sample_params(), 1).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load(&path, 1).is_err());
        std::fs::write(&path, b"NOPE!rest").unwrap();
        assert!(load(&path, 1).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
