//! On-disk formats: KITTI-style raw point clouds, `RMG1` range images and
//! JSONL helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{at_path, Error, Result};
use crate::rangemap::{Point, PointCloud, RangeImage, SensorConfig};

pub const RANGE_IMAGE_MAGIC: &[u8; 4] = b"RMG1";

/// Encodes `N` records of `(x, y, z, intensity)` as little-endian f32.
pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_cloud(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::Format(format!("point cloud payload of {} bytes is not a multiple of 16", bytes.len())));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
    let points = bytes.chunks_exact(16).map(|r| Point::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]), f(&r[12..16]))).collect();
    Ok(PointCloud::new(points))
}

pub fn write_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, encode_cloud(cloud))?;
    Ok(())
}

pub fn read_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    decode_cloud(&std::fs::read(path).map_err(at_path(path))?)
}

/// 16-byte header (`RMG1`, H, W, reserved) then the depth plane and the
/// intensity plane as row-major little-endian f32.
pub fn encode_range_image(img: &RangeImage) -> Vec<u8> {
    let cfg = &img.config;
    let mut out = Vec::with_capacity(16 + 8 * cfg.pixels());
    out.extend_from_slice(RANGE_IMAGE_MAGIC);
    out.extend_from_slice(&(cfg.height as u32).to_le_bytes());
    out.extend_from_slice(&(cfg.width as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for plane in [&img.depth, &img.intensity] {
        for v in plane.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes an `RMG1` payload. The file carries only the grid size, so the
/// sensor angles and depth range come from `config`; its height and width
/// are replaced by the header values.
pub fn decode_range_image(bytes: &[u8], config: &SensorConfig) -> Result<RangeImage> {
    if bytes.len() < 16 || &bytes[..4] != RANGE_IMAGE_MAGIC {
        return Err(Error::Format("missing RMG1 header".into()));
    }
    let u = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize;
    let (h, w) = (u(4), u(8));
    let cfg = config.with_height(h);
    let cfg = SensorConfig { width: w, ..cfg };
    cfg.validate()?;
    let n = h * w;
    if bytes.len() != 16 + 8 * n {
        return Err(Error::Format(format!("RMG1 {h}x{w} expects {} bytes, got {}", 16 + 8 * n, bytes.len())));
    }
    let f = |i: usize| {
        let o = 16 + 4 * i;
        f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as f64
    };
    let mut img = RangeImage::empty(cfg);
    for k in 0..n {
        let d = f(k);
        if d > 0.0 {
            img.depth[k] = d;
            img.intensity[k] = f(n + k);
            img.valid[k] = true;
        }
    }
    Ok(img)
}

pub fn write_range_image(path: impl AsRef<Path>, img: &RangeImage) -> Result<()> {
    std::fs::write(path, encode_range_image(img))?;
    Ok(())
}

pub fn read_range_image(path: impl AsRef<Path>, config: &SensorConfig) -> Result<RangeImage> {
    let mut bytes = Vec::new();
    File::open(path.as_ref()).map_err(at_path(path.as_ref()))?.read_to_end(&mut bytes)?;
    decode_range_image(&bytes, config)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path.as_ref()).map_err(at_path(path.as_ref()))?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
