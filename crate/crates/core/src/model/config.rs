use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters for the encoder and the quantizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Log-mel bins per input frame.
    pub feature_dim: usize,
    /// Frames stacked into one latent step.
    pub stack: usize,
    pub z_dim: usize,
    /// Transformer width.
    pub c_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub conv_kernel: usize,
    pub conv_groups: usize,
    /// Width of the context projection and of the quantized targets.
    pub proj_dim: usize,
    pub mask_prob: f64,
    pub mask_span: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub codebook_groups: usize,
    pub codebook_entries: usize,
}

impl ModelConfig {
    /// Full-size configuration (~300M parameters at 24 layers).
    pub fn paper() -> Self {
        Self {
            feature_dim: 80,
            stack: 4,
            z_dim: 512,
            c_dim: 1024,
            num_layers: 24,
            num_heads: 16,
            ffn_dim: 4096,
            conv_kernel: 48,
            conv_groups: 16,
            proj_dim: 768,
            mask_prob: 0.065,
            mask_span: 5,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
            codebook_groups: 2,
            codebook_entries: 320,
        }
    }

    /// Same topology, small enough for CPU training and gradient checks.
    pub fn toy() -> Self {
        Self {
            z_dim: 64,
            c_dim: 64,
            num_layers: 4,
            num_heads: 2,
            ffn_dim: 256,
            conv_kernel: 8,
            conv_groups: 4,
            proj_dim: 48,
            codebook_entries: 16,
            ..Self::paper()
        }
    }

    pub fn stacked_dim(&self) -> usize {
        self.feature_dim * self.stack
    }

    pub fn head_dim(&self) -> usize {
        self.c_dim / self.num_heads
    }

    pub fn codebook_entry_dim(&self) -> usize {
        self.proj_dim / self.codebook_groups
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("stack", self.stack),
            ("z_dim", self.z_dim),
            ("c_dim", self.c_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("conv_kernel", self.conv_kernel),
            ("conv_groups", self.conv_groups),
            ("proj_dim", self.proj_dim),
            ("mask_span", self.mask_span),
            ("codebook_groups", self.codebook_groups),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.c_dim % self.num_heads != 0 {
            return Err(Error::Config(format!("c_dim {} not divisible by num_heads {}", self.c_dim, self.num_heads)));
        }
        if self.c_dim % self.conv_groups != 0 {
            return Err(Error::Config(format!("c_dim {} not divisible by conv_groups {}", self.c_dim, self.conv_groups)));
        }
        if self.proj_dim % self.codebook_groups != 0 {
            return Err(Error::Config(format!(
                "proj_dim {} not divisible by codebook_groups {}",
                self.proj_dim, self.codebook_groups
            )));
        }
        if self.codebook_entries < 2 {
            return Err(Error::Config("codebook_entries must be at least 2".into()));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::Config(format!("mask_prob must lie in (0, 1], got {}", self.mask_prob)));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("dropout must lie in [0, 1) and layer_norm_eps be positive".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}
