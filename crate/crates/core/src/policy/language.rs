use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};

/// Fixed-length token features for a language goal.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEncoding {
    /// `num_tokens x feature_dim`.
    pub tokens: Array2<f32>,
}

/// Anything that turns a goal string into `num_tokens x feature_dim` features.
pub trait LanguageEncoder: Send + Sync {
    fn num_tokens(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn encode(&self, goal: &str) -> Result<LanguageEncoding>;
}

/// Built-in encoder: lowercase whitespace tokens, each embedded by a
/// Gaussian vector drawn from a generator seeded with the token's hash.
/// Sequences are zero-padded or truncated to `num_tokens`.
#[derive(Debug, Clone)]
pub struct HashLanguageEncoder {
    num_tokens: usize,
    feature_dim: usize,
    seed: u64,
}

impl HashLanguageEncoder {
    pub fn new(num_tokens: usize, feature_dim: usize, seed: u64) -> Self {
        Self { num_tokens, feature_dim, seed }
    }

    fn token_seed(&self, token: &str) -> u64 {
        // FNV-1a, stable across platforms and toolchains.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ self.seed;
        for b in token.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

pub fn tokenize(goal: &str) -> Vec<String> {
    goal.split_whitespace().map(str::to_lowercase).collect()
}

impl LanguageEncoder for HashLanguageEncoder {
    fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn encode(&self, goal: &str) -> Result<LanguageEncoding> {
        let words = tokenize(goal);
        if words.is_empty() {
            return Err(invalid("language goal must be non-empty"));
        }
        let mut tokens = Array2::<f32>::zeros((self.num_tokens, self.feature_dim));
        let scale = 1.0 / (self.feature_dim as f64).sqrt();
        for (row, word) in tokens.rows_mut().into_iter().zip(&words) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.token_seed(word));
            for v in row {
                let x: f64 = StandardNormal.sample(&mut rng);
                *v = (x * scale) as f32;
            }
        }
        Ok(LanguageEncoding { tokens })
    }
}
