//! Reverse diffusion with a trained denoiser, plain or under control.

use crate::checkpoint::Checkpoint;
use crate::controlnet::{ConditionImage, ControlNet};
use crate::engine::{Graph, ParamStore, Tensor};
use crate::error::Result;
use crate::nn::{Ctx, Denoiser, UNetConfig};
use crate::rangemap::{NormalizedImage, SensorConfig};
use crate::schedule::{sample_loop, NoiseSchedule, VelocityModel};
use crate::textenc::TextCondition;

/// Text-conditioned velocity model over one `2 × H × W` image.
pub struct DenoiserModel<'a> {
    pub dn: &'a Denoiser,
    pub params: &'a ParamStore,
    pub height: usize,
    pub width: usize,
}

impl VelocityModel<TextCondition> for DenoiserModel<'_> {
    fn predict_v(&mut self, x_t: &[f64], t: usize, condition: Option<&TextCondition>) -> Result<Vec<f64>> {
        let g = Graph::inference();
        let x = g.constant(Tensor::new([1, 2, self.height, self.width], x_t.to_vec()));
        let text = [condition.cloned().unwrap_or(TextCondition::Null)];
        let out = self.dn.forward(Ctx::new(&g, self.params, false), x, &[t as f64], Some(&text))?;
        Ok(out.v.value().data.clone())
    }
}

/// Velocity model with a control branch; the text side is always null.
pub struct ControlledModel<'a> {
    pub dn: &'a Denoiser,
    pub dn_params: &'a ParamStore,
    pub net: &'a ControlNet,
    pub params: &'a ParamStore,
    pub condition: &'a ConditionImage,
}

impl VelocityModel<TextCondition> for ControlledModel<'_> {
    fn predict_v(&mut self, x_t: &[f64], t: usize, _condition: Option<&TextCondition>) -> Result<Vec<f64>> {
        let g = Graph::inference();
        let (h, w) = (self.condition.height, self.condition.width);
        let x = g.constant(Tensor::new([1, 2, h, w], x_t.to_vec()));
        let text = [TextCondition::Null];
        let v = self.net.controlled_forward(&g, self.dn, self.dn_params, self.params, false, x, &[t as f64], Some(&text), &[self.condition])?;
        Ok(v.value().data.clone())
    }
}

/// Rebuilds the denoiser recorded in a checkpoint's metadata and loads
/// its weights from `namespace`.
pub fn load_denoiser(ck: &Checkpoint, namespace: &str) -> Result<(Denoiser, ParamStore)> {
    let unet: UNetConfig = ck.meta_field("unet")?;
    let mut store = ParamStore::new();
    let dn = Denoiser::new(unet, &mut store, 0)?;
    ck.load_store(namespace, &mut store)?;
    Ok((dn, store))
}

/// Draws one image per seed. The sensor's height sets the output rows, so
/// fewer rows than in training give a sparser scan.
pub fn generate(
    dn: &Denoiser,
    params: &ParamStore,
    sensor: &SensorConfig,
    prompt: &TextCondition,
    cfg_scale: f64,
    schedule: &NoiseSchedule,
    seeds: &[u64],
) -> Result<Vec<NormalizedImage>> {
    let mut model = DenoiserModel { dn, params, height: sensor.height, width: sensor.width };
    let cond = match prompt {
        TextCondition::Null => None,
        c => Some(c),
    };
    seeds
        .iter()
        .map(|&seed| {
            let values = sample_loop(&mut model, (sensor.height, sensor.width, 2), cond, cfg_scale, schedule, seed)?;
            NormalizedImage::from_values(values, *sensor)
        })
        .collect()
}

/// Controlled counterpart of [`generate`] for one condition image.
#[allow(clippy::too_many_arguments)]
pub fn generate_controlled(
    dn: &Denoiser,
    dn_params: &ParamStore,
    net: &ControlNet,
    params: &ParamStore,
    sensor: &SensorConfig,
    condition: &ConditionImage,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<NormalizedImage> {
    let mut model = ControlledModel { dn, dn_params, net, params, condition };
    let values = sample_loop::<TextCondition, _>(&mut model, (sensor.height, sensor.width, 2), None, 1.0, schedule, seed)?;
    NormalizedImage::from_values(values, *sensor)
}
