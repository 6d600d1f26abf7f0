//! Spherical projection between LiDAR point clouds and two-channel range
//! images, plus the value mapping into the diffusion domain `[-1, 1]`.
//!
//! Columns follow azimuth (column 0 at azimuth +π, decreasing to the right),
//! rows follow pitch (row 0 at `fov_up`).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub height: usize,
    pub width: usize,
    /// Upper vertical field of view, degrees.
    pub fov_up: f64,
    /// Lower vertical field of view, degrees (negative below the horizon).
    pub fov_down: f64,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl SensorConfig {
    pub fn new(height: usize, width: usize, fov_up: f64, fov_down: f64, depth_min: f64, depth_max: f64) -> Result<Self> {
        let cfg = Self { height, width, fov_up, fov_down, depth_min, depth_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return invalid(format!("sensor grid must be non-empty, got {}x{}", self.height, self.width));
        }
        if !(self.fov_up > self.fov_down) {
            return invalid(format!("fov_up ({}) must exceed fov_down ({})", self.fov_up, self.fov_down));
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return invalid(format!("depth range must satisfy 0 < min < max, got ({}, {})", self.depth_min, self.depth_max));
        }
        Ok(())
    }

    /// Same sensor with a different number of rows. Used for dense-to-sparse
    /// generation where the output beam count is set by the noise shape.
    pub fn with_height(&self, height: usize) -> Self {
        Self { height, ..*self }
    }

    pub fn fov_up_rad(&self) -> f64 {
        self.fov_up.to_radians()
    }

    pub fn fov_down_rad(&self) -> f64 {
        self.fov_down.to_radians()
    }

    pub fn fov_rad(&self) -> f64 {
        (self.fov_up - self.fov_down).to_radians()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Azimuth of the centre of column `w`, in `(-π, π)`.
    pub fn column_azimuth(&self, w: usize) -> f64 {
        PI * (1.0 - 2.0 * (w as f64 + 0.5) / self.width as f64)
    }

    /// Pitch of the centre of row `h`, radians.
    pub fn row_pitch(&self, h: usize) -> f64 {
        self.fov_up_rad() - self.fov_rad() * (h as f64 + 0.5) / self.height as f64
    }

    /// Sensor resembling a 32-beam spinning LiDAR at full resolution.
    pub fn nuscenes_like() -> Self {
        Self { height: 32, width: 1024, fov_up: 10.0, fov_down: -30.0, depth_min: 1.0, depth_max: 50.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
    /// Optional per-point class labels, same length as `points` when present.
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points, labels: None }
    }

    pub fn with_labels(points: Vec<Point>, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != points.len() {
            return invalid(format!("{} labels for {} points", labels.len(), points.len()));
        }
        Ok(Self { points, labels: Some(labels) })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    /// Row-major `H x W` depth in meters, 0 on invalid pixels.
    pub depth: Vec<f64>,
    /// Row-major `H x W` intensity in `[0, 1]`.
    pub intensity: Vec<f64>,
    pub valid: Vec<bool>,
    pub config: SensorConfig,
}

impl RangeImage {
    pub fn empty(config: SensorConfig) -> Self {
        let n = config.pixels();
        Self { depth: vec![0.0; n], intensity: vec![0.0; n], valid: vec![false; n], config }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn set(&mut self, h: usize, w: usize, depth: f64, intensity: f64) {
        let i = h * self.config.width + w;
        self.depth[i] = depth;
        self.intensity[i] = intensity;
        self.valid[i] = true;
    }
}

/// Range image mapped into `[-1, 1]`, channel-major: depth plane then
/// intensity plane, each row-major `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub values: Vec<f64>,
    pub config: SensorConfig,
}

impl NormalizedImage {
    pub fn from_values(values: Vec<f64>, config: SensorConfig) -> Result<Self> {
        if values.len() != 2 * config.pixels() {
            return Err(Error::ShapeMismatch { expected: vec![2, config.height, config.width], got: vec![values.len()] });
        }
        Ok(Self { values: values.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), config })
    }

    pub fn depth_plane(&self) -> &[f64] {
        &self.values[..self.config.pixels()]
    }

    pub fn intensity_plane(&self) -> &[f64] {
        &self.values[self.config.pixels()..]
    }
}

/// Pixel `(row, column)` a point falls into, or `None` when it lies outside
/// the vertical field of view or the depth range.
pub fn pixel_of(p: &Point, config: &SensorConfig) -> Option<(usize, usize)> {
    let r = p.range();
    if !(r >= config.depth_min && r <= config.depth_max) {
        return None;
    }
    let pitch = (p.z / r).asin();
    let (up, down) = (config.fov_up_rad(), config.fov_down_rad());
    if pitch > up || pitch < down {
        return None;
    }
    let (h, w) = (config.height as f64, config.width as f64);
    let u = (0.5 * (1.0 - p.y.atan2(p.x) / PI) * w).floor();
    let v = ((1.0 - (pitch - down) / (up - down)) * h).floor();
    let col = u.clamp(0.0, w - 1.0) as usize;
    let row = v.clamp(0.0, h - 1.0) as usize;
    Some((row, col))
}

/// Index of the point that owns each pixel under the nearest-wins rule
/// (ties keep the earliest point).
pub fn project_indices(cloud: &PointCloud, config: &SensorConfig) -> Result<Vec<Option<usize>>> {
    config.validate()?;
    let mut owner: Vec<Option<usize>> = vec![None; config.pixels()];
    let mut best = vec![f64::INFINITY; config.pixels()];
    for (i, p) in cloud.points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::RejectedInput(format!("point {i} has non-finite coordinates")));
        }
        if let Some((row, col)) = pixel_of(p, config) {
            let k = row * config.width + col;
            let r = p.range();
            if r < best[k] {
                best[k] = r;
                owner[k] = Some(i);
            }
        }
    }
    Ok(owner)
}

pub fn project(cloud: &PointCloud, config: &SensorConfig) -> Result<RangeImage> {
    let owner = project_indices(cloud, config)?;
    let mut img = RangeImage::empty(*config);
    for (k, o) in owner.iter().enumerate() {
        if let Some(i) = o {
            let p = &cloud.points[*i];
            img.depth[k] = p.range();
            img.intensity[k] = p.intensity.clamp(0.0, 1.0);
            img.valid[k] = true;
        }
    }
    Ok(img)
}

pub fn unproject(img: &RangeImage) -> PointCloud {
    let cfg = &img.config;
    let mut points = Vec::with_capacity(img.valid_count());
    for h in 0..cfg.height {
        let (sp, cp) = cfg.row_pitch(h).sin_cos();
        for w in 0..cfg.width {
            let k = h * cfg.width + w;
            if !img.valid[k] {
                continue;
            }
            let (sa, ca) = cfg.column_azimuth(w).sin_cos();
            let r = img.depth[k];
            points.push(Point::new(r * cp * ca, r * cp * sa, r * sp, img.intensity[k]));
        }
    }
    PointCloud::new(points)
}

fn log_depth_scale(config: &SensorConfig) -> f64 {
    (config.depth_max + 1.0).log2()
}

/// Maps a range image into `[-1, 1]` and reports how many depths had to be
/// clamped to `depth_max`.
pub fn normalize_with_report(img: &RangeImage) -> (NormalizedImage, usize) {
    let cfg = img.config;
    let n = cfg.pixels();
    let scale = log_depth_scale(&cfg);
    let mut values = vec![-1.0; 2 * n];
    let mut clamped = 0;
    for k in 0..n {
        if !img.valid[k] {
            continue;
        }
        let mut d = img.depth[k];
        if d > cfg.depth_max {
            d = cfg.depth_max;
            clamped += 1;
        }
        values[k] = 2.0 * (d + 1.0).log2() / scale - 1.0;
        values[n + k] = 2.0 * img.intensity[k].clamp(0.0, 1.0) - 1.0;
    }
    if clamped > 0 {
        log::warn!("normalize: {clamped} depth values above depth_max were clamped");
    }
    (NormalizedImage { values, config: cfg }, clamped)
}

pub fn normalize(img: &RangeImage) -> NormalizedImage {
    normalize_with_report(img).0
}

pub fn denormalize(norm: &NormalizedImage, config: &SensorConfig) -> Result<RangeImage> {
    if norm.values.len() != 2 * config.pixels() {
        return Err(Error::ShapeMismatch { expected: vec![2, config.height, config.width], got: vec![norm.values.len()] });
    }
    let n = config.pixels();
    let scale = log_depth_scale(config);
    let mut img = RangeImage::empty(*config);
    for k in 0..n {
        let v = norm.values[k].clamp(-1.0, 1.0);
        let d = ((v + 1.0) * 0.5 * scale).exp2() - 1.0;
        if d < config.depth_min {
            continue;
        }
        img.depth[k] = d.min(config.depth_max);
        img.intensity[k] = ((norm.values[n + k].clamp(-1.0, 1.0) + 1.0) * 0.5).clamp(0.0, 1.0);
        img.valid[k] = true;
    }
    Ok(img)
}
