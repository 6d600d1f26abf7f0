//! Noise schedule, forward process and v-parameterization algebra, min-SNR
//! loss weighting and the ancestral (DDPM) sampler driven by v-predictions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit `ᾱ` table of length `T + 1`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return invalid("schedule needs at least one step");
        }
        if alpha_bar[0] != 1.0 {
            return invalid(format!("alpha_bar[0] must be 1, got {}", alpha_bar[0]));
        }
        for t in 1..alpha_bar.len() {
            if !(alpha_bar[t] > 0.0 && alpha_bar[t] < alpha_bar[t - 1]) {
                return invalid(format!("alpha_bar must be positive and strictly decreasing (t = {t})"));
            }
        }
        Ok(Self { alpha_bar })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step `α_t = ᾱ_t / ᾱ_{t-1}`, defined for `t >= 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    /// `σ_t = sqrt(1 - ᾱ_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    /// Posterior standard deviation used by the ancestral sampler.
    pub fn sigma_tilde(&self, t: usize) -> f64 {
        let ratio = (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]);
        (ratio * (1.0 - self.alpha(t))).sqrt()
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid(format!("timestep {t} outside [1, {}]", self.steps()));
        }
        Ok(())
    }
}

/// Cosine schedule with offset `s = 0.008`; per-step betas are clipped at
/// 0.999 so that `ᾱ_T` stays strictly positive.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return invalid("cosine schedule needs T >= 1");
    }
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0);
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for t in 1..=steps {
        let target = f(t) / f0;
        let prev = alpha_bar[t - 1];
        let beta = (1.0 - target / prev).min(MAX_BETA);
        // ᾱ_t equals the closed form whenever the clip is inactive
        alpha_bar.push(if beta < MAX_BETA { target } else { prev * (1.0 - beta) });
    }
    NoiseSchedule::from_alpha_bar(alpha_bar)
}

/// One forward-process draw with its v target.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSample {
    pub x0: Vec<f64>,
    pub eps: Vec<f64>,
    pub t: usize,
    pub x_t: Vec<f64>,
    pub v: Vec<f64>,
}

/// `x_t = √ᾱ x0 + √(1-ᾱ) ε` and `v = √ᾱ ε - √(1-ᾱ) x0`, for an explicit `ᾱ`.
pub fn forward_with_alpha_bar(x0: &[f64], eps: &[f64], alpha_bar: f64) -> (Vec<f64>, Vec<f64>) {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let x_t = x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect();
    let v = x0.iter().zip(eps).map(|(x, e)| a * e - s * x).collect();
    (x_t, v)
}

/// Inverse of the forward rotation: `(x_t, v) -> (x0, ε)`.
pub fn recover_with_alpha_bar(x_t: &[f64], v: &[f64], alpha_bar: f64) -> (Vec<f64>, Vec<f64>) {
    let (a, s) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let x0 = x_t.iter().zip(v).map(|(x, v)| a * x - s * v).collect();
    let eps = x_t.iter().zip(v).map(|(x, v)| s * x + a * v).collect();
    (x0, eps)
}

pub fn make_sample(x0: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<DiffusionSample> {
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch { expected: vec![x0.len()], got: vec![eps.len()] });
    }
    schedule.check_step(t)?;
    let (x_t, v) = forward_with_alpha_bar(x0, eps, schedule.alpha_bar(t));
    Ok(DiffusionSample { x0: x0.to_vec(), eps: eps.to_vec(), t, x_t, v })
}

pub fn recover_from_v(x_t: &[f64], v: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<(Vec<f64>, Vec<f64>)> {
    if x_t.len() != v.len() {
        return Err(Error::ShapeMismatch { expected: vec![x_t.len()], got: vec![v.len()] });
    }
    schedule.check_step(t)?;
    Ok(recover_with_alpha_bar(x_t, v, schedule.alpha_bar(t)))
}

/// Min-SNR weighting adapted to v-prediction: `min(SNR, γ) / (SNR + 1)`.
pub fn min_snr_weight(t: usize, schedule: &NoiseSchedule, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return invalid(format!("snr gamma must be positive, got {gamma}"));
    }
    if t == 0 {
        return invalid("min-SNR weight undefined at t = 0 (infinite SNR)");
    }
    schedule.check_step(t)?;
    let snr = schedule.snr(t);
    Ok(snr.min(gamma) / (snr + 1.0))
}

/// One ancestral step `x_t -> x_{t-1}` from a v-prediction.
pub fn ddpm_step(x_t: &[f64], v_hat: &[f64], t: usize, noise: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if v_hat.len() != x_t.len() || noise.len() != x_t.len() {
        return Err(Error::ShapeMismatch { expected: vec![x_t.len()], got: vec![v_hat.len(), noise.len()] });
    }
    let alpha = schedule.alpha(t);
    let sigma = schedule.sigma(t);
    let sqrt_ab = schedule.alpha_bar(t).sqrt();
    let tilde = schedule.sigma_tilde(t);
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let coef = (1.0 - alpha) / sigma;
    Ok(x_t
        .iter()
        .zip(v_hat)
        .zip(noise)
        .map(|((x, v), n)| {
            let eps_hat = sigma * x + sqrt_ab * v;
            inv_sqrt_alpha * (x - coef * eps_hat) + tilde * n
        })
        .collect())
}

/// Anything that predicts `v` for a noisy image. `None` requests the
/// unconditional prediction.
pub trait VelocityModel<C: ?Sized> {
    fn predict_v(&mut self, x_t: &[f64], t: usize, condition: Option<&C>) -> Result<Vec<f64>>;
}

impl<C: ?Sized, F> VelocityModel<C> for F
where
    F: FnMut(&[f64], usize, Option<&C>) -> Result<Vec<f64>>,
{
    fn predict_v(&mut self, x_t: &[f64], t: usize, condition: Option<&C>) -> Result<Vec<f64>> {
        self(x_t, t, condition)
    }
}

/// Classifier-free guided prediction. With no condition the model is queried
/// unconditionally; with `cfg_scale == 1` only the conditional branch runs.
pub fn guided_v<C: ?Sized, M: VelocityModel<C>>(model: &mut M, x_t: &[f64], t: usize, condition: Option<&C>, cfg_scale: f64) -> Result<Vec<f64>> {
    let check = |v: Vec<f64>| -> Result<Vec<f64>> {
        if v.len() != x_t.len() {
            return Err(Error::ShapeMismatch { expected: vec![x_t.len()], got: vec![v.len()] });
        }
        Ok(v)
    };
    match condition {
        None => check(model.predict_v(x_t, t, None)?),
        Some(c) if cfg_scale == 1.0 => check(model.predict_v(x_t, t, Some(c))?),
        Some(c) => {
            let v_cond = check(model.predict_v(x_t, t, Some(c))?)?;
            let v_uncond = check(model.predict_v(x_t, t, None)?)?;
            Ok(v_uncond.iter().zip(&v_cond).map(|(u, c)| u + cfg_scale * (c - u)).collect())
        }
    }
}

/// Reverse trajectory from a given `x_T`. `noise_for_step` supplies the
/// injected noise for each `t`; returns the unclamped `x_0`.
pub fn reverse_trajectory<C, M, N>(
    mut x: Vec<f64>,
    model: &mut M,
    condition: Option<&C>,
    cfg_scale: f64,
    schedule: &NoiseSchedule,
    mut noise_for_step: N,
) -> Result<Vec<f64>>
where
    C: ?Sized,
    M: VelocityModel<C>,
    N: FnMut(usize, usize) -> Vec<f64>,
{
    for t in (1..=schedule.steps()).rev() {
        let v = guided_v(model, &x, t, condition, cfg_scale)?;
        let noise = noise_for_step(t, x.len());
        x = ddpm_step(&x, &v, t, &noise, schedule)?;
    }
    Ok(x)
}

pub fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Full ancestral sampling of an `(H, W, channels)` image, deterministic in
/// `seed`. Output is clamped to `[-1, 1]` and laid out channel-major.
pub fn sample_loop<C: ?Sized, M: VelocityModel<C>>(
    model: &mut M,
    shape: (usize, usize, usize),
    condition: Option<&C>,
    cfg_scale: f64,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    let (h, w, c) = shape;
    let n = h * w * c;
    if n == 0 {
        return invalid("sample shape must be non-empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_t = standard_normal(&mut rng, n);
    let x0 = reverse_trajectory(x_t, model, condition, cfg_scale, schedule, |t, len| {
        let z = standard_normal(&mut rng, len);
        if t == 1 {
            vec![0.0; len]
        } else {
            z
        }
    })
    .map_err(|e| match e {
        Error::ShapeMismatch { expected, got } => {
            log::error!("model output shape {got:?} does not match sample shape {expected:?}");
            Error::ShapeMismatch { expected, got }
        }
        other => other,
    })?;
    Ok(x0.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
}
