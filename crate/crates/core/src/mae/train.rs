use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::config::{MaeConfig, ModelShape};
use super::model::{loss_and_grad, MaeParams};
use super::optim::{lr_at, AdamState, AdamW};
use crate::error::{Error, Result};
use crate::prep::{FlatClip, CLIP_LEN};
use crate::rng;
use crate::token::{make_mask, make_mask_with_count, patchify, MaskPlan, PatchLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: MaeConfig,
    pub batch_size: usize,
    /// Peak learning rate is `base_lr * batch_size / 256`.
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub mask_ratio: f64,
    /// Overrides `mask_ratio` with an explicit number of visible tubes.
    pub num_visible: Option<usize>,
    pub clip_len: usize,
    pub seed: u64,
    /// Echo only: generator behind every seeded draw.
    pub rng: String,
    /// Echo only: standard deviation convention used in preprocessing.
    pub std_convention: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: MaeConfig::default(),
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 31_000,
            total_steps: 625_000,
            mask_ratio: 0.9,
            num_visible: None,
            clip_len: CLIP_LEN,
            seed: 0,
            rng: rng::GENERATOR.into(),
            std_convention: "population".into(),
        }
    }
}

impl TrainConfig {
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_at(step, self.peak_lr(), self.warmup_steps, self.total_steps)
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.peak_lr(),
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask_ratio must be in [0, 1), got {}", self.mask_ratio)));
        }
        if !self.clip_len.is_multiple_of(self.model.p_t) {
            return Err(Error::Config(format!("clip_len {} not divisible by p_t {}", self.clip_len, self.model.p_t)));
        }
        Ok(())
    }
}

/// Mask for sample `index` of the batch at `step`. Depends only on
/// `(seed, step, index)`.
pub fn mask_for(cfg: &TrainConfig, layout: &PatchLayout, step: u64, index: usize) -> Result<MaskPlan> {
    let seed = rng::stream2(cfg.seed, step, index as u64).next_u64();
    match cfg.num_visible {
        Some(n) => make_mask_with_count(layout, n, seed),
        None => make_mask(layout, cfg.mask_ratio, seed),
    }
}

/// Parameters, optimizer moments and loss trace of a pretraining run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub layout: PatchLayout,
    pub params: MaeParams<f32>,
    pub state: AdamState<MaeParams<f32>>,
    pub trace: Vec<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, layout: PatchLayout) -> Result<Self> {
        cfg.validate()?;
        if layout.p_t != cfg.model.p_t || layout.p != cfg.model.p || layout.n_frames != cfg.clip_len {
            return Err(Error::Config(format!(
                "layout ({} frames, p_t {}, p {}) does not match config ({} frames, p_t {}, p {})",
                layout.n_frames, layout.p_t, layout.p, cfg.clip_len, cfg.model.p_t, cfg.model.p
            )));
        }
        let params = MaeParams::init(&cfg.model, &ModelShape::of(&layout), cfg.seed)?;
        let state = AdamState::new(&params);
        Ok(Self { cfg, layout, params, state, trace: Vec::new() })
    }

    pub fn step(&self) -> u64 {
        self.state.step
    }

    /// One optimizer step on a batch of clips; returns the batch loss.
    pub fn train_step(&mut self, clips: &[FlatClip]) -> Result<f64> {
        let step = self.state.step;
        let batch = clips
            .iter()
            .enumerate()
            .map(|(i, c)| Ok((patchify(c, &self.layout)?, mask_for(&self.cfg, &self.layout, step, i)?)))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = loss_and_grad(&self.params, &self.cfg.model, &batch, 1.0, step)?;
        let lr = self.cfg.lr_at(step);
        self.cfg.optimizer().step(&mut self.params, &grads, &mut self.state, lr)?;
        let loss = loss as f64;
        self.trace.push(loss);
        log::debug!("step {step} loss {loss:.6} lr {lr:.3e}");
        Ok(loss)
    }

    /// Runs `steps` more steps, pulling one batch per step.
    pub fn pretrain<I>(&mut self, batches: &mut I, steps: u64) -> Result<&[f64]>
    where
        I: Iterator<Item = Result<Vec<FlatClip>>>,
    {
        let start = self.trace.len();
        for _ in 0..steps {
            let batch = batches
                .next()
                .ok_or_else(|| Error::InsufficientData(format!("data source ran dry at step {}", self.state.step)))??;
            self.train_step(&batch)?;
        }
        Ok(&self.trace[start..])
    }
}
