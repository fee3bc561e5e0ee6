use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the image encoder, the gaze
/// encoder and the integration stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_integration_layers: usize,
    pub mlp_ratio: usize,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 4,
            n_integration_layers: 2,
            mlp_ratio: 4,
            n_classes: 3,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration that still exercises every code path; used
    /// for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            d_model: 8,
            n_heads: 2,
            n_encoder_layers: 1,
            n_integration_layers: 1,
            mlp_ratio: 2,
            n_classes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model.{name} must be positive")));
        }
        if self.n_classes < 2 {
            return Err(Error::contract("model.n_classes must be at least 2"));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::contract(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(Error::contract(format!(
                "d_model {} must be divisible by 4 for the spatial encoding",
                self.d_model
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens emitted by the image encoder, `[CLS]` included.
    pub fn n_image_tokens(&self) -> usize {
        1 + self.n_patches()
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}
