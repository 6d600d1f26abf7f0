//! Joint training of the denoiser and the guidance network: losses, the
//! alignment weight schedule, the guidance freeze, classifier-free dropout,
//! AdamW and the EMA shadow.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, ParamStore, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{Ctx, Denoiser, GuidanceNet, UNetConfig};
use crate::rangemap::{normalize, project, NormalizedImage, PointCloud, SensorConfig};
use crate::schedule::{cosine_schedule, forward_with_alpha_bar, min_snr_weight, standard_normal, NoiseSchedule};
use crate::textenc::{TextCondition, TextEncoder};

/// What happens to the alignment term once the guidance network freezes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AfterFreeze {
    /// Keep the frozen network as a teacher; drop only its own loss.
    Teacher,
    /// Drop the guidance network entirely.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub gn_active_steps: u64,
    pub lambda_values: Vec<f64>,
    pub lambda_interval: u64,
    pub snr_gamma: f64,
    pub cfg_dropout: f64,
    pub ema_decay: f64,
    pub ema_update_every: u64,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub timesteps: usize,
    /// Train with the guidance network and alignment loss.
    pub scrg: bool,
    pub after_freeze: AfterFreeze,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

impl TrainConfig {
    pub fn full_scale() -> Self {
        Self {
            total_steps: 400_000,
            gn_active_steps: 100_000,
            lambda_values: vec![0.001, 0.01, 0.1, 1.0],
            lambda_interval: 25_000,
            snr_gamma: 5.0,
            cfg_dropout: 0.1,
            ema_decay: 0.9997,
            ema_update_every: 1,
            lr: 1e-4,
            lr_min: 0.0,
            weight_decay: 0.01,
            batch_size: 16,
            timesteps: 1024,
            scrg: true,
            after_freeze: AfterFreeze::Teacher,
            seed: 0,
        }
    }

    /// Every step count multiplied by `ratio` (rounded, at least 1).
    pub fn scaled(&self, ratio: f64) -> Self {
        let s = |v: u64| ((v as f64 * ratio).round() as u64).max(1);
        Self { total_steps: s(self.total_steps), gn_active_steps: s(self.gn_active_steps), lambda_interval: s(self.lambda_interval), ..self.clone() }
    }

    /// Desk defaults: step constants at 1/200, a higher learning rate for
    /// the short run, small batches and a 64-step chain.
    pub fn desk() -> Self {
        Self { lr: 1e-3, batch_size: 2, timesteps: 64, ema_decay: 0.995, ..Self::full_scale().scaled(1.0 / 200.0) }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| -> Result<()> {
            if !(0.0..1.0).contains(&v) {
                return invalid(format!("{name} must lie in [0, 1), got {v}"));
            }
            Ok(())
        };
        unit("cfg_dropout", self.cfg_dropout)?;
        unit("weight_decay", self.weight_decay)?;
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return invalid(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if !(self.lr > 0.0 && self.lr < 1.0) || !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return invalid("learning rates must satisfy 0 <= lr_min <= lr < 1");
        }
        if self.lambda_values.is_empty() || self.lambda_interval == 0 {
            return invalid("lambda schedule needs values and a positive interval");
        }
        if self.batch_size == 0 || self.timesteps == 0 || self.total_steps == 0 || self.ema_update_every == 0 {
            return invalid("batch size, timesteps, total steps and EMA period must be positive");
        }
        if self.snr_gamma <= 0.0 {
            return invalid("snr_gamma must be positive");
        }
        if self.lambda_interval * self.lambda_values.len() as u64 > self.gn_active_steps {
            log::warn!("lambda schedule outlasts the guidance phase; the last value holds afterwards");
        }
        Ok(())
    }

    /// Reads `key = value` lines (`#` starts a comment). Lists are comma
    /// separated. Unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = serde_json::Map::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return invalid(format!("config line {}: expected key = value", n + 1));
            };
            map.insert(k.trim().to_owned(), kv_value(k.trim(), v.trim()));
        }
        let cfg: Self = serde_json::from_value(serde_json::Value::Object(map)).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    /// Inverse of [`TrainConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        let map: BTreeMap<String, serde_json::Value> = serde_json::from_value(value).expect("object");
        map.iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::Array(items) => items.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", "),
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                format!("{k} = {s}\n")
            })
            .collect()
    }
}

fn kv_value(key: &str, v: &str) -> serde_json::Value {
    use serde_json::Value;
    let scalar = |s: &str| -> Value {
        let s = s.trim();
        if let Ok(i) = s.parse::<u64>() {
            return Value::from(i);
        }
        if let Ok(f) = s.parse::<f64>() {
            return Value::from(f);
        }
        match s {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            _ => Value::String(s.to_owned()),
        }
    };
    if key == "lambda_values" {
        return Value::Array(v.split(',').filter(|p| !p.trim().is_empty()).map(|p| Value::from(p.trim().parse::<f64>().unwrap_or(f64::NAN))).collect());
    }
    scalar(v)
}

/// `lambda_values[min(step / lambda_interval, last)]`.
pub fn lambda_of_step(step: u64, config: &TrainConfig) -> f64 {
    let idx = ((step / config.lambda_interval) as usize).min(config.lambda_values.len() - 1);
    config.lambda_values[idx]
}

/// Cosine decay from `lr` to `lr_min` over `total_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let p = (step as f64 / config.total_steps as f64).min(1.0);
    config.lr_min + 0.5 * (config.lr - config.lr_min) * (1.0 + (PI * p).cos())
}

/// Per-sample mean Huber (δ = 1) of `v_hat − v`, scaled by `weights[b]`,
/// averaged over the batch.
pub fn loss_denoise<'g>(v_hat: Var<'g>, v: Var<'g>, weights: &[f64]) -> Var<'g> {
    let per_sample = v_hat.sub(v).huber(1.0).mean_per_sample();
    let w = v_hat.graph().constant(Tensor::new([weights.len()], weights.to_vec()));
    per_sample.mul(w).mean_all()
}

pub fn loss_guidance<'g>(recon: Var<'g>, x0: Var<'g>) -> Var<'g> {
    recon.sub(x0).sqr().mean_all()
}

/// Mean over levels of the mean per-position `1 − cos` along channels.
pub fn loss_align<'g>(recon: &[Var<'g>], noise: &[Var<'g>]) -> Result<Var<'g>> {
    if recon.len() != noise.len() || recon.is_empty() {
        return invalid(format!("pyramids of {} and {} levels", recon.len(), noise.len()));
    }
    let mut total: Option<Var<'g>> = None;
    for (a, b) in recon.iter().zip(noise) {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch { expected: a.shape(), got: b.shape() });
        }
        let term = a.channel_cosine(*b).scale(-1.0).add_scalar(1.0).mean_all();
        total = Some(match total {
            Some(t) => t.add(term),
            None => term,
        });
    }
    Ok(total.unwrap().scale(1.0 / recon.len() as f64))
}

/// Adam with decoupled weight decay on tensors of rank ≥ 2.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = &grads[id.0] else { continue };
            let decay = store.get(id).shape.len() >= 2;
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                if decay {
                    p.data[i] -= lr * weight_decay * p.data[i];
                }
                p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let src = params.get(id);
        let dst = shadow.get_mut(id);
        for (s, p) in dst.data.iter_mut().zip(&src.data) {
            *s = decay * *s + (1.0 - decay) * p;
        }
    }
}

/// One training image with its prompt.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub image: NormalizedImage,
    pub text: TextCondition,
}

impl TrainExample {
    /// Projects and normalises `cloud` and encodes `prompt`.
    pub fn from_cloud(cloud: &PointCloud, prompt: &str, sensor: &SensorConfig, encoder: &dyn TextEncoder) -> Result<Self> {
        Ok(Self { image: normalize(&project(cloud, sensor)?), text: encoder.encode(prompt) })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub loss_denoise: f64,
    pub loss_guidance: f64,
    pub loss_align: f64,
    pub lambda: f64,
    pub lr: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,loss_denoise,loss_guidance,loss_align,lambda,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.loss_denoise, self.loss_guidance, self.loss_align, self.lambda, self.lr)
    }
}

/// Output of [`TrainState::step_gradients`]. Gradients follow the order
/// of their parameter stores; `None` marks a parameter the loss did not
/// reach.
pub struct StepGradients {
    pub report: LossReport,
    pub dn: Vec<Option<Vec<f64>>>,
    pub gn: Vec<Option<Vec<f64>>>,
    /// Gradient of the alignment term alone with respect to each denoiser
    /// pyramid level; empty when the term is off.
    pub align_wrt_noise: Vec<Option<Vec<f64>>>,
}

pub struct TrainState {
    pub dn: Denoiser,
    pub gn: GuidanceNet,
    pub dn_params: ParamStore,
    pub gn_params: ParamStore,
    pub ema: ParamStore,
    pub schedule: NoiseSchedule,
    pub step: u64,
    opt_dn: AdamW,
    opt_gn: AdamW,
    rng: ChaCha8Rng,
}

impl TrainState {
    /// Fresh networks. Initial weights depend on `config.seed` only; the
    /// same seed with and without guidance gives the same denoiser.
    pub fn new(net: UNetConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut dn_params = ParamStore::new();
        let dn = Denoiser::new(net.clone(), &mut dn_params, config.seed)?;
        let mut gn_params = ParamStore::new();
        let gn = GuidanceNet::new(net, &mut gn_params, config.seed ^ 0x9e37_79b9_7f4a_7c15)?;
        Ok(Self {
            opt_dn: AdamW::new(&dn_params),
            opt_gn: AdamW::new(&gn_params),
            ema: dn_params.clone(),
            dn,
            gn,
            dn_params,
            gn_params,
            schedule: cosine_schedule(config.timesteps)?,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1)),
        })
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Whether the guidance network still receives updates.
    pub fn guidance_active(&self, config: &TrainConfig) -> bool {
        config.scrg && self.step < config.gn_active_steps
    }

    pub fn train_step(&mut self, batch: &[TrainExample], config: &TrainConfig) -> Result<LossReport> {
        let grads = self.step_gradients(batch, config)?;
        let lr = grads.report.lr;
        self.opt_dn.step(&mut self.dn_params, &grads.dn, lr, config.weight_decay);
        if self.guidance_active(config) {
            self.opt_gn.step(&mut self.gn_params, &grads.gn, lr, config.weight_decay);
        }
        self.step += 1;
        if self.step.is_multiple_of(config.ema_update_every) {
            ema_update(&mut self.ema, &self.dn_params, config.ema_decay);
        }
        Ok(grads.report)
    }

    /// Losses and gradients of the next step without applying them. The
    /// RNG advances exactly as in [`TrainState::train_step`].
    pub fn step_gradients(&mut self, batch: &[TrainExample], config: &TrainConfig) -> Result<StepGradients> {
        if batch.is_empty() {
            return invalid("empty batch");
        }
        let sensor = batch[0].image.config;
        let (h, w) = (sensor.height, sensor.width);
        if batch.iter().any(|e| e.image.config.height != h || e.image.config.width != w) {
            return invalid("batch images differ in size");
        }
        let b = batch.len();
        let n = 2 * h * w;

        // Draws happen in a fixed order so runs with and without guidance
        // see identical data.
        let mut text = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        let mut x0 = Vec::with_capacity(b * n);
        let mut x_t = Vec::with_capacity(b * n);
        let mut v = Vec::with_capacity(b * n);
        let mut weights = Vec::with_capacity(b);
        for ex in batch {
            let drop = self.rng.gen_bool(config.cfg_dropout);
            text.push(if drop { TextCondition::Null } else { ex.text.clone() });
            let t = self.rng.gen_range(1..=self.schedule.steps());
            let eps = standard_normal(&mut self.rng, n);
            let (xt, vt) = forward_with_alpha_bar(&ex.image.values, &eps, self.schedule.alpha_bar(t));
            x0.extend_from_slice(&ex.image.values);
            x_t.extend(xt);
            v.extend(vt);
            ts.push(t as f64);
            weights.push(min_snr_weight(t, &self.schedule, config.snr_gamma)?);
        }

        let lambda = lambda_of_step(self.step, config);
        let lr = lr_at(self.step, config);
        let active = self.guidance_active(config);
        let teacher = config.scrg && !active && config.after_freeze == AfterFreeze::Teacher;

        let g = Graph::new();
        let shape = [b, 2, h, w];
        let x_t = g.constant(Tensor::new(shape, x_t));
        let x0v = g.constant(Tensor::new(shape, x0));
        let vv = g.constant(Tensor::new(shape, v));
        let out = self.dn.forward(Ctx::new(&g, &self.dn_params, true), x_t, &ts, Some(&text))?;
        let l_dn = loss_denoise(out.v, vv, &weights);
        let mut total = l_dn;
        let (mut l_gn, mut l_al) = (0.0, 0.0);
        let mut align = None;
        if active {
            let go = self.gn.forward(Ctx::new(&g, &self.gn_params, true), x0v, &out.pyramid)?;
            let lg = loss_guidance(go.recon, x0v);
            let la = loss_align(&go.pyramid, &out.pyramid)?;
            l_gn = lg.item();
            l_al = la.item();
            align = Some(la);
            total = total.add(lg).add(la.scale(lambda));
        } else if teacher {
            let frozen = Graph::inference();
            let fx0 = frozen.constant((*x0v.value()).clone());
            let fpyr: Vec<Var> = out.pyramid.iter().map(|p| frozen.constant((*p.value()).clone())).collect();
            let go = self.gn.forward(Ctx::new(&frozen, &self.gn_params, false), fx0, &fpyr)?;
            let recon_feats: Vec<Var> = go.pyramid.iter().map(|p| g.constant((*p.value()).clone())).collect();
            let la = loss_align(&recon_feats, &out.pyramid)?;
            l_al = la.item();
            align = Some(la);
            total = total.add(la.scale(lambda));
        }

        let report = LossReport { step: self.step, loss_denoise: l_dn.item(), loss_guidance: l_gn, loss_align: l_al, lambda, lr, total: total.item() };
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, detail: format!("denoise {} guidance {} align {}", report.loss_denoise, l_gn, l_al) });
        }

        let grads = g.backward(total);
        let align_wrt_noise = match align {
            Some(la) => {
                let ga = g.backward(la);
                out.pyramid.iter().map(|p| ga.of(*p).map(<[f64]>::to_vec)).collect()
            }
            None => Vec::new(),
        };
        Ok(StepGradients { report, dn: grads.for_store(&self.dn_params), gn: grads.for_store(&self.gn_params), align_wrt_noise })
    }

    /// Mean weighted denoising loss of `params` over `data` at evenly
    /// spaced timesteps with noise fixed by `seed`; no update happens.
    pub fn held_out_loss(&self, params: &ParamStore, data: &[TrainExample], timesteps_per_example: usize, seed: u64, snr_gamma: f64) -> Result<f64> {
        if data.is_empty() || timesteps_per_example == 0 {
            return invalid("held-out loss needs data and timesteps");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = self.schedule.steps();
        let mut total = 0.0;
        let mut count = 0;
        for ex in data {
            let cfg = ex.image.config;
            let n = 2 * cfg.pixels();
            for k in 0..timesteps_per_example {
                let t = 1 + (k * steps + steps / 2) / timesteps_per_example;
                let t = t.min(steps);
                let eps = standard_normal(&mut rng, n);
                let (xt, vt) = forward_with_alpha_bar(&ex.image.values, &eps, self.schedule.alpha_bar(t));
                let g = Graph::inference();
                let shape = [1, 2, cfg.height, cfg.width];
                let out =
                    self.dn.forward(Ctx::new(&g, params, false), g.constant(Tensor::new(shape, xt)), &[t as f64], Some(std::slice::from_ref(&ex.text)))?;
                let w = min_snr_weight(t, &self.schedule, snr_gamma)?;
                total += loss_denoise(out.v, g.constant(Tensor::new(shape, vt)), &[w]).item();
                count += 1;
            }
        }
        Ok(total / count as f64)
    }

    /// Draws a batch uniformly with replacement from `data`.
    pub fn draw_batch(&mut self, data: &[TrainExample], size: usize) -> Vec<TrainExample> {
        (0..size).map(|_| data[self.rng.gen_range(0..data.len())].clone()).collect()
    }

    /// Runs `config.total_steps − step` steps, calling `log` after each.
    pub fn run(&mut self, data: &[TrainExample], config: &TrainConfig, mut log: impl FnMut(&LossReport)) -> Result<()> {
        if data.is_empty() {
            return invalid("no training data");
        }
        while self.step < config.total_steps {
            let batch = self.draw_batch(data, config.batch_size);
            let report = self.train_step(&batch, config)?;
            log(&report);
        }
        Ok(())
    }
}
