//! Conditional control of a frozen denoiser: a trainable copy of its
//! encoder fed with a condition image, fused into the decoder skips through
//! zero-initialised 1×1 projections. Also builds the sparse and semantic
//! condition images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{concat, Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::layers::Conv;
use crate::nn::{Builder, ControlEncoder, Ctx, Denoiser};
use crate::rangemap::{normalize, project, project_indices, NormalizedImage, Point, PointCloud, SensorConfig};
use crate::schedule::{cosine_schedule, forward_with_alpha_bar, min_snr_weight, standard_normal, NoiseSchedule};
use crate::textenc::TextCondition;
use crate::training::{loss_denoise, AdamW};

/// Channel-major `c × H × W` condition with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ConditionImage {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != channels * height * width || mask.len() != height * width {
            return Err(Error::ShapeMismatch { expected: vec![channels, height, width], got: vec![values.len(), mask.len()] });
        }
        Ok(Self { channels, height, width, values, mask })
    }

    /// A normalized range image used directly as a condition.
    pub fn from_image(img: &NormalizedImage) -> Self {
        let n = img.config.pixels();
        let mask = img.depth_plane().iter().map(|v| *v > -1.0).collect();
        Self { channels: 2, height: img.config.height, width: img.config.width, values: img.values[..2 * n].to_vec(), mask }
    }
}

/// `1×1` projection `x ↦ conv(x, W, b)`; the caller owns the parameters.
pub fn zero_project<'g>(x: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Var<'g> {
    x.conv2d(weight, Some(bias), Default::default())
}

/// Indices kept by farthest-point sampling, starting from `seed`.
pub fn farthest_point_indices(points: &[Point], keep: usize, seed: usize) -> Vec<usize> {
    let keep = keep.min(points.len());
    if keep == 0 {
        return Vec::new();
    }
    let d2 = |a: &Point, b: &Point| (a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2);
    let mut chosen = Vec::with_capacity(keep);
    let mut nearest = vec![f64::INFINITY; points.len()];
    let mut current = seed;
    for _ in 0..keep {
        chosen.push(current);
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, current);
        for (i, p) in points.iter().enumerate() {
            let d = d2(p, &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
            if nearest[i] > best.0 {
                best = (nearest[i], i);
            }
        }
        current = best.1;
    }
    chosen
}

/// Index of the point farthest from the sensor (first on ties).
pub fn max_norm_index(points: &[Point]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, p) in points.iter().enumerate() {
        let r = p.range();
        if best.is_none_or(|(b, _)| r > b) {
            best = Some((r, i));
        }
    }
    best.map(|(_, i)| i)
}

/// Keeps `⌈N / rate⌉` points by farthest-point sampling from the
/// farthest point. `rate == 1` returns the cloud unchanged.
pub fn downsample_cloud(cloud: &PointCloud, rate: usize) -> Result<PointCloud> {
    if cloud.is_empty() {
        return invalid("cannot downsample an empty cloud");
    }
    if rate == 0 {
        return invalid("downsampling rate must be at least 1");
    }
    if rate == 1 {
        return Ok(cloud.clone());
    }
    let keep = cloud.len().div_ceil(rate);
    let seed = max_norm_index(&cloud.points).expect("nonempty");
    let mut idx = farthest_point_indices(&cloud.points, keep, seed);
    idx.sort_unstable();
    let points = idx.iter().map(|&i| cloud.points[i]).collect();
    match &cloud.labels {
        Some(l) => PointCloud::with_labels(points, idx.iter().map(|&i| l[i]).collect()),
        None => Ok(PointCloud::new(points)),
    }
}

/// Sparse range-image condition from a farthest-point subsample.
pub fn make_sparse_condition(cloud: &PointCloud, rate: usize, config: &SensorConfig) -> Result<ConditionImage> {
    let sparse = downsample_cloud(cloud, rate)?;
    Ok(ConditionImage::from_image(&normalize(&project(&sparse, config)?)))
}

/// One-channel map of `label / class_count` under nearest-wins projection.
pub fn make_semantic_condition(cloud: &PointCloud, class_count: u32, config: &SensorConfig) -> Result<ConditionImage> {
    if class_count == 0 {
        return invalid("class count must be positive");
    }
    let n = cloud.len();
    let labels = match &cloud.labels {
        Some(l) => l.as_slice(),
        None if n == 0 => &[],
        None => return invalid("semantic condition needs per-point labels"),
    };
    if let Some(bad) = labels.iter().find(|l| **l >= class_count) {
        return invalid(format!("label {bad} outside [0, {class_count})"));
    }
    let owner = project_indices(cloud, config)?;
    let values = owner.iter().map(|o| o.map_or(0.0, |i| labels[i] as f64 / class_count as f64)).collect();
    let mask = owner.iter().map(Option::is_some).collect();
    ConditionImage::new(1, config.height, config.width, values, mask)
}

/// Trainable control branch.
#[derive(Debug, Clone)]
pub struct ControlNet {
    encoder: ControlEncoder,
    zero: Vec<Conv>,
    pub condition_channels: usize,
    /// Also feed the noisy input to the branch, concatenated after the
    /// condition channels.
    pub with_noisy_input: bool,
}

impl ControlNet {
    /// Registers parameters under `control.` in `params`. Encoder weights
    /// whose shapes agree are copied from the denoiser.
    pub fn new(dn: &Denoiser, dn_params: &ParamStore, params: &mut ParamStore, condition_channels: usize, with_noisy_input: bool, seed: u64) -> Result<Self> {
        if condition_channels == 0 {
            return invalid("condition needs at least one channel");
        }
        let cfg = &dn.config;
        let input = condition_channels + if with_noisy_input { cfg.in_channels } else { 0 };
        let mut b = Builder::new(params, seed, "control");
        let encoder = ControlEncoder::new(cfg, input, &mut b);
        let zero = (0..cfg.levels()).map(|l| Conv::new(&mut b, &format!("zero{l}"), cfg.channels(l), cfg.channels(l), 1, true)).collect();
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(rest) = params.name(id).strip_prefix("control.") else { continue };
            if let Some(src) = dn_params.find(&format!("dn.{rest}")) {
                if dn_params.get(src).shape == params.get(id).shape {
                    *params.get_mut(id) = dn_params.get(src).clone();
                }
            }
        }
        Ok(Self { encoder, zero, condition_channels, with_noisy_input })
    }

    fn branch_input<'g>(&self, g: &'g Graph, x_t: Var<'g>, cond: &[&ConditionImage]) -> Result<Var<'g>> {
        let xs = x_t.shape();
        if cond.len() != xs[0] {
            return invalid(format!("{} conditions for a batch of {}", cond.len(), xs[0]));
        }
        let mut data = Vec::new();
        for c in cond {
            if c.channels != self.condition_channels || c.height != xs[2] || c.width != xs[3] {
                return invalid(format!("condition {}×{}×{} does not match {}×{}×{}", c.channels, c.height, c.width, self.condition_channels, xs[2], xs[3]));
            }
            data.extend_from_slice(&c.values);
        }
        let c = g.constant(Tensor::new([xs[0], self.condition_channels, xs[2], xs[3]], data));
        Ok(if self.with_noisy_input { concat(&[c, x_t], 1) } else { c })
    }

    /// Denoiser output with the control residuals added to its skips.
    /// `dn` parameters enter as constants.
    #[allow(clippy::too_many_arguments)]
    pub fn controlled_forward<'g>(
        &self,
        g: &'g Graph,
        dn: &Denoiser,
        dn_params: &ParamStore,
        params: &ParamStore,
        trainable: bool,
        x_t: Var<'g>,
        t: &[f64],
        text: Option<&[TextCondition]>,
        cond: &[&ConditionImage],
    ) -> Result<Var<'g>> {
        let dcx = Ctx::new(g, dn_params, false);
        let ccx = Ctx::new(g, params, trainable);
        let enc = dn.encode(dcx, x_t, t, text)?;
        let input = self.branch_input(g, x_t, cond)?;
        let taps = self.encoder.forward(ccx, input, t, input.shape()[1])?;
        let residuals: Vec<Var> =
            taps.iter().zip(&enc.pyramid).zip(&self.zero).map(|((c, d), z)| zero_project(c.add(*d), ccx.p(z.weight), ccx.p(z.bias))).collect();
        dn.decode(dcx, &enc, Some(&residuals))
    }
}

/// A frozen denoiser with its control branch and optimiser.
pub struct ControlState {
    pub dn: Denoiser,
    pub dn_params: ParamStore,
    pub net: ControlNet,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
    pub step: u64,
    opt: AdamW,
    rng: ChaCha8Rng,
}

/// One control training pair: the clean target and its condition.
#[derive(Debug, Clone)]
pub struct ControlExample {
    pub target: NormalizedImage,
    pub condition: ConditionImage,
}

impl ControlState {
    pub fn new(dn: Denoiser, dn_params: ParamStore, condition_channels: usize, with_noisy_input: bool, timesteps: usize, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = ControlNet::new(&dn, &dn_params, &mut params, condition_channels, with_noisy_input, seed)?;
        Ok(Self {
            opt: AdamW::new(&params),
            dn,
            dn_params,
            net,
            params,
            schedule: cosine_schedule(timesteps)?,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
        })
    }

    /// One update of the control branch on min-SNR-weighted Huber loss.
    /// Prompts are the null condition.
    pub fn train_step(&mut self, batch: &[ControlExample], lr: f64, weight_decay: f64, snr_gamma: f64) -> Result<f64> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let cfg = batch[0].target.config;
        let (b, n) = (batch.len(), 2 * cfg.pixels());
        let (mut x_t, mut v, mut ts, mut w) = (Vec::with_capacity(b * n), Vec::with_capacity(b * n), Vec::new(), Vec::new());
        for ex in batch {
            if ex.target.values.len() != n {
                return invalid("batch targets differ in size");
            }
            let t = self.rng.gen_range(1..=self.schedule.steps());
            let eps = standard_normal(&mut self.rng, n);
            let (xt, vt) = forward_with_alpha_bar(&ex.target.values, &eps, self.schedule.alpha_bar(t));
            x_t.extend(xt);
            v.extend(vt);
            ts.push(t as f64);
            w.push(min_snr_weight(t, &self.schedule, snr_gamma)?);
        }
        let g = Graph::new();
        let shape = [b, 2, cfg.height, cfg.width];
        let x_t = g.constant(Tensor::new(shape, x_t));
        let text = vec![TextCondition::Null; b];
        let cond: Vec<&ConditionImage> = batch.iter().map(|e| &e.condition).collect();
        let v_hat = self.net.controlled_forward(&g, &self.dn, &self.dn_params, &self.params, true, x_t, &ts, Some(&text), &cond)?;
        let loss = loss_denoise(v_hat, g.constant(Tensor::new(shape, v)), &w);
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: format!("control loss {value}") });
        }
        let grads = g.backward(loss).for_store(&self.params);
        self.opt.step(&mut self.params, &grads, lr, weight_decay);
        self.step += 1;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fps_on_a_line() {
        let pts: Vec<Point> = [0.0, 1.0, 10.0].iter().map(|x| Point::new(*x, 0.0, 0.0, 0.0)).collect();
        let mut kept = farthest_point_indices(&pts, 2, 0);
        kept.sort();
        assert_eq!(kept, vec![0, 2]);
        let mut from_far = farthest_point_indices(&pts, 2, max_norm_index(&pts).unwrap());
        from_far.sort();
        assert_eq!(from_far, vec![0, 2]);
    }

    #[test]
    fn downsample_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..4000).map(|_| Point::new(rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-2.0..2.0), 0.5)).collect();
        let cloud = PointCloud::new(pts);
        assert_eq!(downsample_cloud(&cloud, 4).unwrap().len(), 1000);
        assert_eq!(downsample_cloud(&cloud, 3).unwrap().len(), 1334);
        assert_eq!(downsample_cloud(&cloud, 1).unwrap(), cloud);
        assert!(downsample_cloud(&PointCloud::new(vec![]), 4).is_err());
    }

    #[test]
    fn semantic_values() {
        let cfg = SensorConfig::new(8, 64, 10.0, -30.0, 1.0, 50.0).unwrap();
        let pts = vec![Point::new(10.0, 0.0, -1.0, 0.3), Point::new(0.0, 8.0, -1.0, 0.3)];
        let cloud = PointCloud::with_labels(pts.clone(), vec![3, 3]).unwrap();
        let c = make_semantic_condition(&cloud, 4, &cfg).unwrap();
        for (v, m) in c.values.iter().zip(&c.mask) {
            assert_eq!(*v, if *m { 0.75 } else { 0.0 });
        }
        assert_eq!(c.mask.iter().filter(|m| **m).count(), 2);
        let empty = make_semantic_condition(&PointCloud::new(vec![]), 4, &cfg).unwrap();
        assert!(empty.values.iter().all(|v| *v == 0.0));
        let bad = PointCloud::with_labels(pts, vec![0, 4]).unwrap();
        assert!(make_semantic_condition(&bad, 4, &cfg).is_err());
    }
}
