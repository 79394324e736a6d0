//! Frozen-encoder evaluation: probes, baselines and the hyperparameter sweep.

mod connectome;
mod probes;

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::{lr_at, AdamState, AdamW};
use crate::nn::{accumulate, scale, zeros_like};
use crate::rng;

pub use connectome::{connectome_features, connectome_len, parcel_means, ParcelMap};
pub use probes::{argmax, cross_entropy, AttentiveProbe, LinearProbe, PatchEmbedProbe, Probe, ProbeInput};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub lr_scales: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            epochs: 20,
            batch_size: 128,
            base_lr: 5e-4,
            warmup_epochs: 2,
            lr_scales: vec![0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0],
            weight_decays: vec![3e-4, 0.001, 0.01, 0.03, 0.1, 0.3, 1.0],
            beta1: 0.9,
            beta2: 0.95,
            seed: 0,
        }
    }
}

/// One point of the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lr_scale: f64,
    pub weight_decay: f64,
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_scales.is_empty() || self.weight_decays.is_empty() {
            return Err(Error::Config("probe sweep grids must be non-empty".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.heads == 0 {
            return Err(Error::Config("epochs, batch_size and heads must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }

    /// Grid in learning-rate-major order.
    pub fn grid(&self) -> Vec<SweepPoint> {
        self.lr_scales
            .iter()
            .flat_map(|&lr_scale| {
                self.weight_decays.iter().map(move |&weight_decay| SweepPoint { lr_scale, weight_decay })
            })
            .collect()
    }
}

/// Labelled probe inputs.
#[derive(Clone, Debug, Default)]
pub struct ProbeSet {
    pub inputs: Vec<ProbeInput>,
    pub labels: Vec<usize>,
}

impl ProbeSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, x: ProbeInput, label: usize) {
        self.inputs.push(x);
        self.labels.push(label);
    }
}

pub fn accuracy<P: Probe>(probe: &P, set: &ProbeSet) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let hits = set.inputs.iter().zip(&set.labels).filter(|(x, &y)| argmax(&probe.logits(x)) == y).count();
    hits as f64 / set.len() as f64
}

/// Trains a probe with AdamW, `warmup_epochs` of linear warmup then cosine
/// decay, mean cross-entropy per minibatch. Shuffling depends only on
/// `cfg.seed` and the epoch, so every sweep point sees the same batches.
pub fn train_probe<P: Probe>(mut probe: P, train: &ProbeSet, cfg: &ProbeConfig, point: SweepPoint) -> Result<P> {
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let opt = AdamW {
        lr: cfg.base_lr * point.lr_scale,
        weight_decay: point.weight_decay,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
    };
    let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let (warmup, total) = (cfg.warmup_epochs as u64 * per_epoch, cfg.epochs as u64 * per_epoch);
    let mut state = AdamState::new(&probe);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = zeros_like(&probe);
            for &i in batch {
                probe.loss_grad(&train.inputs[i], train.labels[i], &mut grad);
            }
            scale(&mut grad, 1.0 / batch.len() as f64);
            let lr = if warmup >= total { opt.lr } else { lr_at(state.step, opt.lr, warmup, total) };
            opt.step(&mut probe, &grad, &mut state, lr)?;
        }
    }
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    pub lr: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the config with the best validation accuracy;
    /// ties go to the earlier grid point.
    pub best: usize,
    pub test_acc: f64,
}

impl SweepResult {
    pub fn best_point(&self) -> SweepPoint {
        self.rows[self.best].point
    }

    /// `lr_scale,weight_decay,lr,val_acc,test_acc`; test accuracy is only
    /// filled for the selected row.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "lr_scale,weight_decay,lr,val_acc,test_acc")?;
        for (i, r) in self.rows.iter().enumerate() {
            let test = if i == self.best { self.test_acc.to_string() } else { String::new() };
            writeln!(w, "{},{},{},{},{}", r.point.lr_scale, r.point.weight_decay, r.lr, r.val_acc, test)?;
        }
        Ok(())
    }
}

/// Trains one probe per grid point in parallel, picks the best on the
/// validation split and evaluates only that one on the test split.
/// `init` builds the untrained probe; it is called once per grid point.
pub fn run_sweep<P: Probe>(
    init: impl Fn() -> Result<P> + Sync,
    cfg: &ProbeConfig,
    train: &ProbeSet,
    val: &ProbeSet,
    test: &ProbeSet,
) -> Result<(SweepResult, P)> {
    cfg.validate()?;
    for (name, s) in [("train", train), ("val", val), ("test", test)] {
        if s.is_empty() {
            return Err(Error::Config(format!("empty {name} split")));
        }
    }
    let grid = cfg.grid();
    let trained: Vec<(P, SweepRow)> = grid
        .par_iter()
        .map(|&point| {
            let probe = train_probe(init()?, train, cfg, point)?;
            let val_acc = accuracy(&probe, val);
            log::debug!("probe lr x{} wd {}: val {:.4}", point.lr_scale, point.weight_decay, val_acc);
            Ok((probe, SweepRow { point, lr: cfg.base_lr * point.lr_scale, val_acc }))
        })
        .collect::<Result<_>>()?;
    let best =
        trained.iter().enumerate().fold(0, |b, (i, (_, r))| if r.val_acc > trained[b].1.val_acc { i } else { b });
    let (rows, mut probes): (Vec<SweepRow>, Vec<P>) = trained.into_iter().map(|(p, r)| (r, p)).unzip();
    let probe = probes.swap_remove(best);
    let test_acc = accuracy(&probe, test);
    Ok((SweepResult { rows, best, test_acc }, probe))
}

/// Sums gradients of several probes; exposed for data-parallel callers.
pub fn sum_grads<P: Probe>(grads: &[P]) -> Option<P> {
    let mut it = grads.iter();
    let mut acc = it.next()?.clone();
    for g in it {
        accumulate(&mut acc, g);
    }
    Some(acc)
}
