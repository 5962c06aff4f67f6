//! IDX files as distributed with MNIST, plain or gzip-compressed.
//!
//! Layout: big-endian `u32` magic (`0x0000_0803` for images,
//! `0x0000_0801` for labels), then one big-endian `u32` per dimension,
//! then the unsigned bytes.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images and labels as stored on disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawMnist {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawMnist {
    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Image `i` scaled to `[0, 1]`.
    pub fn image(&self, i: usize) -> Vec<f64> {
        let p = self.pixel_count();
        self.pixels[i * p..(i + 1) * p]
            .iter()
            .map(|&v| f64::from(v) / 255.0)
            .collect()
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<RawMnist> {
    let img = read_maybe_gz(images)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(images, format!("bad image magic {magic:#010x}")));
    }
    let count = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let need = count * rows * cols;
    if img.len() < 16 + need {
        return Err(Error::format(
            images,
            format!("truncated: {} pixel bytes, header promises {need}", img.len() - 16),
        ));
    }

    let lab = read_maybe_gz(labels)?;
    let magic = be_u32(&lab, 0, labels)?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(labels, format!("bad label magic {magic:#010x}")));
    }
    let lcount = be_u32(&lab, 4, labels)? as usize;
    if lcount != count {
        return Err(Error::format(
            labels,
            format!("{lcount} labels for {count} images"),
        ));
    }
    if lab.len() < 8 + count {
        return Err(Error::format(labels, "truncated label data"));
    }
    Ok(RawMnist {
        count,
        rows,
        cols,
        pixels: img[16..16 + need].to_vec(),
        labels: lab[8..8 + count].to_vec(),
    })
}

/// Writes both files; gzip-compressed when `gzip` is set.
pub fn write_idx(raw: &RawMnist, images: &Path, labels: &Path, gzip: bool) -> Result<()> {
    let mut img = Vec::with_capacity(16 + raw.pixels.len());
    for v in [IMAGES_MAGIC, raw.count as u32, raw.rows as u32, raw.cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&raw.pixels);
    let mut lab = Vec::with_capacity(8 + raw.labels.len());
    for v in [LABELS_MAGIC, raw.count as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(&raw.labels);
    write_bytes(images, &img, gzip)?;
    write_bytes(labels, &lab, gzip)
}

fn write_bytes(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if gzip {
        let mut enc = GzEncoder::new(f, Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut f = f;
        f.write_all(bytes)
    };
    res.map_err(|e| Error::io(path, e))
}
