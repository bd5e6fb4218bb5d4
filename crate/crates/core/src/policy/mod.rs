//! The trainable policy: a latent-bottleneck transformer over voxel patches
//! and language tokens, decoded into four Q-functions.

mod checkpoint;
mod language;
mod model;
pub mod tape;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::action_codec::RotationBins;
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, NamedArray, CHECKPOINT_VERSION};
pub use language::{HashLanguageEncoder, LanguageEncoder, LanguageEncoding};
pub use model::{ForwardTrace, ParamStore, Policy, PolicyInput};
pub use tape::Scalar;

/// Architecture knobs. Defaults reproduce the full-size configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Voxels per axis (cubic grid).
    pub grid_size: usize,
    pub patch_size: usize,
    pub num_latents: usize,
    pub latent_dim: usize,
    pub num_self_attn_layers: usize,
    /// Token width; the patch features and tiled proprioception each take half.
    pub embed_dim: usize,
    pub rotation_bin_deg: f64,
    pub num_lang_tokens: usize,
    pub lang_feature_dim: usize,
    pub num_attention_heads: usize,
    pub voxel_feature_dim: usize,
    /// Feed-forward hidden width as a multiple of `latent_dim`.
    pub ff_mult: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            grid_size: 100,
            patch_size: 5,
            num_latents: 2048,
            latent_dim: 512,
            num_self_attn_layers: 6,
            embed_dim: 128,
            rotation_bin_deg: 5.0,
            num_lang_tokens: 77,
            lang_feature_dim: 512,
            num_attention_heads: 8,
            voxel_feature_dim: 64,
            ff_mult: 4,
        }
    }
}

impl PolicyConfig {
    /// 8^3 grid with 4 latents of width 8; small enough for finite differences.
    pub fn tiny() -> Self {
        Self {
            grid_size: 8,
            patch_size: 4,
            num_latents: 4,
            latent_dim: 8,
            num_self_attn_layers: 1,
            embed_dim: 8,
            rotation_bin_deg: 30.0,
            num_lang_tokens: 3,
            lang_feature_dim: 6,
            num_attention_heads: 1,
            voxel_feature_dim: 4,
            ff_mult: 2,
        }
    }

    /// 32^3 grid sized for CPU training in the toy world.
    pub fn toy() -> Self {
        Self {
            grid_size: 32,
            patch_size: 4,
            num_latents: 512,
            latent_dim: 32,
            num_self_attn_layers: 2,
            embed_dim: 32,
            rotation_bin_deg: 5.0,
            num_lang_tokens: 8,
            lang_feature_dim: 32,
            num_attention_heads: 4,
            voxel_feature_dim: 16,
            ff_mult: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let positive = [
            ("grid_size", self.grid_size),
            ("patch_size", self.patch_size),
            ("num_latents", self.num_latents),
            ("latent_dim", self.latent_dim),
            ("embed_dim", self.embed_dim),
            ("num_lang_tokens", self.num_lang_tokens),
            ("lang_feature_dim", self.lang_feature_dim),
            ("num_attention_heads", self.num_attention_heads),
            ("voxel_feature_dim", self.voxel_feature_dim),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.patch_size > 0 && self.grid_size % self.patch_size != 0 {
            errs.push(format!(
                "grid_size {} is not divisible by patch_size {}",
                self.grid_size, self.patch_size
            ));
        }
        if self.embed_dim != 2 * self.voxel_feature_dim {
            errs.push(format!(
                "embed_dim {} must equal twice voxel_feature_dim {}",
                self.embed_dim, self.voxel_feature_dim
            ));
        }
        if self.num_attention_heads > 0 && self.latent_dim % self.num_attention_heads != 0 {
            errs.push(format!(
                "latent_dim {} is not divisible by num_attention_heads {}",
                self.latent_dim, self.num_attention_heads
            ));
        }
        if let Err(e) = RotationBins::new(self.rotation_bin_deg) {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn rotation_bins(&self) -> Result<RotationBins> {
        RotationBins::new(self.rotation_bin_deg)
    }

    pub fn patches_per_axis(&self) -> usize {
        self.grid_size / self.patch_size
    }

    pub fn num_voxel_tokens(&self) -> usize {
        self.patches_per_axis().pow(3)
    }

    /// Input sequence length: voxel patches followed by language tokens.
    pub fn seq_len(&self) -> usize {
        self.num_voxel_tokens() + self.num_lang_tokens
    }

    pub fn num_voxels(&self) -> usize {
        self.grid_size.pow(3)
    }

    pub fn grid(&self) -> [usize; 3] {
        [self.grid_size; 3]
    }
}

/// The four action-value arrays produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct QPrediction {
    pub q_trans: Array3<f64>,
    /// `bins x 3`, one column per Euler axis.
    pub q_rot: Array2<f64>,
    pub q_open: [f64; 2],
    pub q_collide: [f64; 2],
}

impl QPrediction {
    pub fn zeros(grid: [usize; 3], bins: usize) -> Self {
        Self {
            q_trans: Array3::zeros((grid[0], grid[1], grid[2])),
            q_rot: Array2::zeros((bins, 3)),
            q_open: [0.0; 2],
            q_collide: [0.0; 2],
        }
    }

    /// Name of the first head holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        if self.q_trans.iter().any(|v| !v.is_finite()) {
            Some("translation")
        } else if self.q_rot.iter().any(|v| !v.is_finite()) {
            Some("rotation")
        } else if self.q_open.iter().any(|v| !v.is_finite()) {
            Some("open")
        } else if self.q_collide.iter().any(|v| !v.is_finite()) {
            Some("collide")
        } else {
            None
        }
    }
}
