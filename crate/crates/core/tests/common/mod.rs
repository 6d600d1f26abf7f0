//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod captions;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2ldm::engine::{ParamStore, Tensor};
use t2ldm::nn::UNetConfig;
use t2ldm::rangemap::{NormalizedImage, SensorConfig};
use t2ldm::textenc::{HashTextEncoder, TextCondition};

/// Small network that still has every level and both attention kinds.
pub fn tiny_unet() -> UNetConfig {
    UNetConfig { base_channels: 4, heads: vec![1, 1, 2, 2], groups: 2, time_dim: 16, dpe_terms: 2, ..UNetConfig::desk(4) }
}

pub fn sensor(height: usize, width: usize) -> SensorConfig {
    SensorConfig::new(height, width, 10.0, -30.0, 1.0, 50.0).unwrap()
}

/// Overwrites every parameter with `N(0, std²)` draws so zero-initialised
/// paths carry signal.
pub fn scramble(store: &mut ParamStore, seed: u64, std: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape.clone();
        *store.get_mut(id) = Tensor::randn(shape, std, &mut rng);
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

/// Values in `[-1, 1]` shaped as a normalised image.
pub fn random_image(config: SensorConfig, seed: u64) -> NormalizedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..2 * config.pixels()).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    NormalizedImage::from_values(values, config).unwrap()
}

pub fn prompt(text: &str) -> TextCondition {
    HashTextEncoder::default().encode_text(text)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
