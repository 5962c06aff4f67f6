//! Binary dataset cache.
//!
//! All integers little-endian.
//!
//! ```text
//! "MLXD" | version u32 (=1) | config hash u64 | seed u64
//! name length u32 | name bytes (UTF-8)
//! input_dim u32 | classes u32
//! for split in [train, val, test]:
//!     count u32
//!     count records: y u32 | group u32 | x as input_dim f32 | m bit-packed,
//!                    ceil(input_dim / 8) bytes, least significant bit first
//! ```

use std::path::Path;

use super::{DatasetSplits, MaskedExample};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MLXD";
const VERSION: u32 = 1;

/// Provenance stored in the cache header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheMeta {
    pub config_hash: u64,
    pub seed: u64,
}

pub fn write_cache(path: &Path, data: &DatasetSplits, meta: CacheMeta) -> Result<()> {
    data.validate()?;
    let d = data.input_dim;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&meta.config_hash.to_le_bytes());
    buf.extend_from_slice(&meta.seed.to_le_bytes());
    buf.extend_from_slice(&(data.name.len() as u32).to_le_bytes());
    buf.extend_from_slice(data.name.as_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(data.classes as u32).to_le_bytes());
    for split in [&data.train, &data.val, &data.test] {
        buf.extend_from_slice(&(split.len() as u32).to_le_bytes());
        for e in split {
            buf.extend_from_slice(&(e.y as u32).to_le_bytes());
            buf.extend_from_slice(&(e.group as u32).to_le_bytes());
            for &v in &e.x {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let mut packed = vec![0u8; d.div_ceil(8)];
            for (j, &v) in e.m.iter().enumerate() {
                if v != 0.0 {
                    packed[j / 8] |= 1 << (j % 8);
                }
            }
            buf.extend_from_slice(&packed);
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<(DatasetSplits, CacheMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::format(path, "truncated dataset cache"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::format(path, "bad dataset cache magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported cache version {version}")));
    }
    let meta = CacheMeta {
        config_hash: u64_at(take(8)?),
        seed: u64_at(take(8)?),
    };
    let name_len = u32_at(take(4)?) as usize;
    let name = String::from_utf8(take(name_len)?.to_vec())
        .map_err(|_| Error::format(path, "dataset name is not UTF-8"))?;
    let d = u32_at(take(4)?) as usize;
    let classes = u32_at(take(4)?) as usize;
    let mut splits: Vec<Vec<MaskedExample>> = Vec::with_capacity(3);
    for _ in 0..3 {
        let count = u32_at(take(4)?) as usize;
        let mut split = Vec::with_capacity(count);
        for _ in 0..count {
            let y = u32_at(take(4)?) as usize;
            let group = u32_at(take(4)?) as usize;
            let x = take(4 * d)?
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let packed = take(d.div_ceil(8))?;
            let m = (0..d)
                .map(|j| f64::from((packed[j / 8] >> (j % 8)) & 1))
                .collect();
            split.push(MaskedExample { x, y, m, group });
        }
        splits.push(split);
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes in dataset cache"));
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let data = DatasetSplits {
        name,
        input_dim: d,
        classes,
        train,
        val,
        test,
    };
    data.validate()?;
    Ok((data, meta))
}
