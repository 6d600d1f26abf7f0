//! Directional position encoding: per-pixel azimuth and elevation angles,
//! their Fourier features, and the gated injection into feature maps.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use crate::engine::{ConvSpec, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rangemap::SensorConfig;

/// Pixel-centre angles in radians, row-major `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    pub height: usize,
    pub width: usize,
    /// Azimuth in `(0, 2π]`, decreasing along a row.
    pub theta: Vec<f64>,
    /// Elevation, decreasing down a column.
    pub phi: Vec<f64>,
}

pub fn pixel_angle_grid(config: &SensorConfig) -> AngleGrid {
    let (h, w) = (config.height, config.width);
    let up = config.fov_up_rad();
    let fov = config.fov_rad();
    let mut theta = Vec::with_capacity(h * w);
    let mut phi = Vec::with_capacity(h * w);
    for r in 0..h {
        let p = up - fov * (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            theta.push(2.0 * PI - 2.0 * PI * (c as f64 + 0.5) / w as f64);
            phi.push(p);
        }
    }
    AngleGrid { height: h, width: w, theta, phi }
}

/// Fourier features `[4K, H, W]`; term `k` occupies channels
/// `4k..4k+4` as `sin(2^k θ), cos(2^k θ), sin(2^k φ), cos(2^k φ)`.
pub fn dpe_features(grid: &AngleGrid, terms: usize) -> Result<Tensor> {
    if terms == 0 {
        return invalid("DPE needs at least one Fourier term");
    }
    let n = grid.height * grid.width;
    let mut data = vec![0.0; 4 * terms * n];
    for k in 0..terms {
        let f = (1u64 << k) as f64;
        for (i, (&t, &p)) in grid.theta.iter().zip(&grid.phi).enumerate() {
            let (st, ct) = (f * t).sin_cos();
            let (sp, cp) = (f * p).sin_cos();
            data[(4 * k) * n + i] = st;
            data[(4 * k + 1) * n + i] = ct;
            data[(4 * k + 2) * n + i] = sp;
            data[(4 * k + 3) * n + i] = cp;
        }
    }
    Ok(Tensor::new(vec![4 * terms, grid.height, grid.width], data))
}

/// `x + alpha * projection(dpe)`. `dpe` is `[1, 4K, H, W]` and is shared
/// across the batch; `projection` is a 1×1 conv weight `[C, 4K, 1, 1]`;
/// `alpha` holds one value.
pub fn apply_dpe<'g>(x: Var<'g>, dpe: Var<'g>, alpha: Var<'g>, projection: Var<'g>) -> Result<Var<'g>> {
    let xs = x.shape();
    let ps = projection.shape();
    let ds = dpe.shape();
    if xs.len() != 4 || ps.len() != 4 || ds.len() != 4 {
        return invalid("DPE injection expects NCHW tensors");
    }
    if ps[0] != xs[1] || ps[1] != ds[1] {
        return invalid(format!("DPE projection {ps:?} does not map {} channels to {}", ds[1], xs[1]));
    }
    if ds[2..] != xs[2..] {
        return invalid(format!("DPE grid {:?} does not match features {:?}", &ds[2..], &xs[2..]));
    }
    let injected = dpe.conv2d(projection, None, ConvSpec::default()).mul_bcast(alpha.reshape(&[1, 1, 1, 1]));
    Ok(x.add_bcast(injected))
}

/// `(H, W, FoV bits, K)`.
type GridKey = (usize, usize, u64, u64, usize);

/// Feature grids keyed by image size, field of view and band count.
#[derive(Default)]
pub struct DpeCache {
    grids: RefCell<HashMap<GridKey, Rc<Tensor>>>,
}

impl std::fmt::Debug for DpeCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DpeCache").field("entries", &self.grids.borrow().len()).finish()
    }
}

impl DpeCache {
    /// Returns `[1, 4K, H, W]` features for `config`.
    pub fn get(&self, config: &SensorConfig, terms: usize) -> Result<Rc<Tensor>> {
        let key = (config.height, config.width, config.fov_up.to_bits(), config.fov_down.to_bits(), terms);
        if let Some(t) = self.grids.borrow().get(&key) {
            return Ok(Rc::clone(t));
        }
        let t = dpe_features(&pixel_angle_grid(config), terms)?;
        let shape = [1, 4 * terms, config.height, config.width];
        let t = Rc::new(t.reshaped(shape));
        self.grids.borrow_mut().insert(key, Rc::clone(&t));
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Graph;

    fn cfg(h: usize, w: usize) -> SensorConfig {
        SensorConfig::new(h, w, 10.0, -30.0, 1.0, 50.0).unwrap()
    }

    #[test]
    fn grid_examples() {
        let g = pixel_angle_grid(&cfg(32, 1024));
        assert!((g.theta[0] - 6.280117).abs() < 1e-6);
        assert!((g.theta[1023] - 0.003068).abs() < 1e-6);
        assert!((g.phi[0].to_degrees() - 9.375).abs() < 1e-12);
        assert_eq!(g.phi[5], g.phi[0]);
        assert!(g.theta[1] < g.theta[0]);
        assert!(g.phi[1024] < g.phi[0]);
    }

    #[test]
    fn feature_layout_and_identities() {
        let grid = pixel_angle_grid(&cfg(4, 16));
        let f = dpe_features(&grid, 3).unwrap();
        assert_eq!(f.shape, vec![12, 4, 16]);
        let n = 64;
        for i in 0..n {
            let (s0, c0, s1) = (f.data[i], f.data[n + i], f.data[4 * n + i]);
            assert!((s1 - 2.0 * s0 * c0).abs() < 1e-12);
        }
        assert!(f.data.iter().all(|v| v.abs() <= 1.0));
        let zero = AngleGrid { height: 1, width: 1, theta: vec![0.0], phi: vec![0.0] };
        let z = dpe_features(&zero, 4).unwrap();
        for k in 0..4 {
            assert_eq!(z.data[4 * k], 0.0);
            assert_eq!(z.data[4 * k + 1], 1.0);
        }
        assert!(dpe_features(&grid, 0).is_err());
    }

    #[test]
    fn gated_injection() {
        let g = Graph::inference();
        let x = g.constant(Tensor::full([2, 3, 2, 4], 0.5));
        let dpe = g.constant(dpe_features(&pixel_angle_grid(&cfg(2, 4)), 1).unwrap().reshaped([1, 4, 2, 4]));
        let w = g.constant(Tensor::full([3, 4, 1, 1], 0.25));
        let closed = apply_dpe(x, dpe, g.constant(Tensor::scalar(0.0)), w).unwrap().value();
        assert_eq!(*closed, *x.value());
        let zero_proj = g.constant(Tensor::zeros([3, 4, 1, 1]));
        assert_eq!(*apply_dpe(x, dpe, g.constant(Tensor::scalar(1.0)), zero_proj).unwrap().value(), *x.value());
        let one = apply_dpe(x, dpe, g.constant(Tensor::scalar(1.0)), w).unwrap().value();
        let two = apply_dpe(x, dpe, g.constant(Tensor::scalar(2.0)), w).unwrap().value();
        for ((a, b), c) in one.data.iter().zip(&two.data).zip(&x.value().data) {
            assert!(((b - a) - (a - c)).abs() < 1e-12);
        }
        assert!(apply_dpe(x, dpe, g.constant(Tensor::scalar(1.0)), g.constant(Tensor::zeros([5, 4, 1, 1]))).is_err());
    }

    #[test]
    fn cache_returns_shared_grid() {
        let cache = DpeCache::default();
        let a = cache.get(&cfg(4, 8), 2).unwrap();
        let b = cache.get(&cfg(4, 8), 2).unwrap();
        assert!(Rc::ptr_eq(&a, &b));
        assert_eq!(a.shape, vec![1, 8, 4, 8]);
        assert_ne!(cache.get(&cfg(4, 8), 3).unwrap().shape, a.shape);
    }

    #[test]
    fn column_shift_rotates_azimuth() {
        let (h, w, delta) = (2, 16, 3);
        let base = pixel_angle_grid(&cfg(h, w));
        let mut rotated = base.clone();
        rotated.theta.iter_mut().for_each(|t| *t -= 2.0 * PI * delta as f64 / w as f64);
        let f = dpe_features(&base, 4).unwrap();
        let fr = dpe_features(&rotated, 4).unwrap();
        for ch in 0..16 {
            for r in 0..h {
                for c in 0..w {
                    let shifted = f.data[(ch * h + r) * w + (c + delta) % w];
                    assert!((fr.data[(ch * h + r) * w + c] - shifted).abs() < 1e-6);
                }
            }
        }
    }
}
