//! Prompt encoding into `n × 768` token features.
//!
//! The bundled encoder hashes each token to a fixed pseudo-random unit
//! vector, so prompts map deterministically without pretrained weights. Any
//! encoder producing 768-wide rows can stand in through [`TextEncoder`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::schedule::standard_normal;

pub const TEXT_WIDTH: usize = 768;

/// Token features, row-major `n × 768`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    tokens: usize,
    data: Vec<f64>,
}

impl TextEmbedding {
    /// `data.len()` must be a nonzero multiple of 768.
    pub fn from_rows(data: Vec<f64>) -> Option<Self> {
        if data.is_empty() || !data.len().is_multiple_of(TEXT_WIDTH) || !data.iter().all(|v| v.is_finite()) {
            return None;
        }
        Some(Self { tokens: data.len() / TEXT_WIDTH, data })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * TEXT_WIDTH..(i + 1) * TEXT_WIDTH]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// What a denoiser is conditioned on. `Null` selects the model's learned
/// unconditional row.
#[derive(Debug, Clone, PartialEq)]
pub enum TextCondition {
    Tokens(TextEmbedding),
    Null,
}

pub trait TextEncoder {
    fn encode(&self, prompt: &str) -> TextCondition;
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.to_lowercase().split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_owned).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTextEncoder {
    pub seed: u64,
}

impl Default for HashTextEncoder {
    fn default() -> Self {
        Self { seed: 0x7e57_1da7 }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf29ce484222325u64, |h, b| (h ^ *b as u64).wrapping_mul(0x100000001b3))
}

impl HashTextEncoder {
    fn unit_row(&self, key: &[u8]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(key) ^ self.seed.rotate_left(17));
        let mut row = standard_normal(&mut rng, TEXT_WIDTH);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
        row
    }

    pub fn token_row(&self, token: &str) -> Vec<f64> {
        self.unit_row(token.as_bytes())
    }

    /// Initial value for a model's unconditional row. The key contains a
    /// byte the tokenizer never emits, so it cannot collide with a token.
    pub fn null_row(&self) -> Vec<f64> {
        self.unit_row(b"\0null")
    }

    pub fn encode_text(&self, prompt: &str) -> TextCondition {
        let tokens = tokenize(prompt);
        if tokens.is_empty() {
            return TextCondition::Null;
        }
        let data = tokens.iter().flat_map(|t| self.token_row(t)).collect();
        TextCondition::Tokens(TextEmbedding::from_rows(data).expect("hash rows are finite and nonempty"))
    }
}

impl TextEncoder for HashTextEncoder {
    fn encode(&self, prompt: &str) -> TextCondition {
        self.encode_text(prompt)
    }
}
