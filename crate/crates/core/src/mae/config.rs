use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token::PatchLayout;

/// Encoder/decoder widths and depths. Blocks are pre-norm with a GELU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeConfig {
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub p_t: usize,
    pub p: usize,
    pub mlp_ratio: f64,
    /// Standardize each target patch over its valid pixels before the loss.
    pub norm_pix_loss: bool,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self {
            enc_dim: 64,
            enc_depth: 4,
            enc_heads: 4,
            dec_dim: 32,
            dec_depth: 2,
            dec_heads: 4,
            p_t: 16,
            p: 16,
            mlp_ratio: 4.0,
            norm_pix_loss: false,
        }
    }
}

impl MaeConfig {
    /// ViT-B/16 encoder with the usual 8-block, 512-wide MAE decoder.
    pub fn vit_b(p_t: usize) -> Self {
        Self {
            enc_dim: 768,
            enc_depth: 12,
            enc_heads: 12,
            dec_dim: 512,
            dec_depth: 8,
            dec_heads: 16,
            p_t,
            p: 16,
            mlp_ratio: 4.0,
            norm_pix_loss: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_depth == 0 || self.dec_depth == 0 {
            return Err(Error::Config("encoder and decoder depth must be >= 1".into()));
        }
        if self.enc_heads == 0 || !self.enc_dim.is_multiple_of(self.enc_heads) {
            return Err(Error::Config(format!(
                "enc_dim {} not divisible by enc_heads {}",
                self.enc_dim, self.enc_heads
            )));
        }
        if self.dec_heads == 0 || !self.dec_dim.is_multiple_of(self.dec_heads) {
            return Err(Error::Config(format!(
                "dec_dim {} not divisible by dec_heads {}",
                self.dec_dim, self.dec_heads
            )));
        }
        if self.p == 0 || self.p_t == 0 {
            return Err(Error::Config("patch sizes must be positive".into()));
        }
        if !(self.mlp_ratio > 0.0) || self.enc_hidden() == 0 || self.dec_hidden() == 0 {
            return Err(Error::Config(format!("mlp_ratio {} gives an empty MLP", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn enc_hidden(&self) -> usize {
        (self.enc_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn dec_hidden(&self) -> usize {
        (self.dec_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Layout-dependent sizes the parameter tables are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub grid_t: usize,
    pub n_spatial: usize,
    pub patch_dim: usize,
}

impl ModelShape {
    pub fn of(layout: &PatchLayout) -> Self {
        Self { grid_t: layout.grid_t, n_spatial: layout.n_spatial(), patch_dim: layout.patch_dim() }
    }
}

fn block_params(dim: usize, hidden: usize) -> usize {
    let ln = 2 * dim;
    let qkv = dim * 3 * dim + 3 * dim;
    let proj = dim * dim + dim;
    let mlp = dim * hidden + hidden + hidden * dim + dim;
    2 * ln + qkv + proj + mlp
}

/// Encoder parameters: patch embedding, factorized position tables, blocks
/// and the final norm.
pub fn encoder_param_count(cfg: &MaeConfig, shape: &ModelShape) -> usize {
    let d = cfg.enc_dim;
    shape.patch_dim * d
        + d
        + (shape.grid_t + shape.n_spatial) * d
        + cfg.enc_depth * block_params(d, cfg.enc_hidden())
        + 2 * d
}

pub fn decoder_param_count(cfg: &MaeConfig, shape: &ModelShape) -> usize {
    let (d, e) = (cfg.dec_dim, cfg.enc_dim);
    e * d
        + d
        + d
        + (shape.grid_t + shape.n_spatial) * d
        + cfg.dec_depth * block_params(d, cfg.dec_hidden())
        + 2 * d
        + d * shape.patch_dim
        + shape.patch_dim
}

pub fn param_count(cfg: &MaeConfig, shape: &ModelShape) -> usize {
    encoder_param_count(cfg, shape) + decoder_param_count(cfg, shape)
}
