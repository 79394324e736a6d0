//! FMCKPT1: magic, u32-length JSON header, u32 tensor count, then for each
//! tensor a length-prefixed name, u32 rank, u32 dims and f32 data. All
//! little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelShape;
use super::model::MaeParams;
use super::optim::AdamState;
use super::train::{TrainConfig, Trainer};
use crate::binio::{read_file, write_file, Reader, Writer};
use crate::data::LoaderConfig;
use crate::error::{Error, Result};
use crate::nn::ParamVisit;
use crate::token::PatchLayout;

pub const FMCKPT_MAGIC: &[u8; 8] = b"FMCKPT1\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: TrainConfig,
    pub shape: ModelShape,
    pub step: u64,
    /// Hex SHA-256 of the resampling grid the model was trained on.
    pub grid_hash: Option<String>,
    pub rng: String,
    /// Data loader settings, so a resumed run can replay the same batches.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loader: Option<LoaderConfig>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: MaeParams<f32>,
    pub state: AdamState<MaeParams<f32>>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, grid_hash: Option<[u8; 32]>) -> Self {
        Self {
            header: CheckpointHeader {
                config: t.cfg.clone(),
                shape: ModelShape::of(&t.layout),
                step: t.state.step,
                grid_hash: grid_hash.map(hex::encode),
                rng: crate::rng::GENERATOR.into(),
                loader: None,
            },
            params: t.params.clone(),
            state: t.state.clone(),
        }
    }

    /// Rebuilds a trainer for `layout`, which must match the stored shape.
    pub fn into_trainer(self, layout: PatchLayout) -> Result<Trainer> {
        if ModelShape::of(&layout) != self.header.shape {
            return Err(Error::Config(format!(
                "checkpoint was trained on {:?}, layout gives {:?}",
                self.header.shape,
                ModelShape::of(&layout)
            )));
        }
        let mut t = Trainer::new(self.header.config, layout)?;
        t.params = self.params;
        t.state = self.state;
        Ok(t)
    }

    pub fn check_grid(&self, hash: &[u8; 32]) -> Result<()> {
        match &self.header.grid_hash {
            Some(h) if *h != hex::encode(hash) => {
                Err(Error::Validation(format!("grid hash mismatch: checkpoint {h}, data {}", hex::encode(hash))))
            }
            _ => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.raw(FMCKPT_MAGIC);
        let json = serde_json::to_vec(&self.header)?;
        w.u32(json.len() as u32);
        w.raw(&json);
        let mut tensors = Vec::new();
        for (prefix, p) in [("param", &self.params), ("adam_m", &self.state.m), ("adam_v", &self.state.v)] {
            p.visit(prefix, &mut |name, m| tensors.push((name.replacen('.', "/", 1), m)));
        }
        w.u32(tensors.len() as u32);
        for (name, m) in tensors {
            w.string(&name);
            w.u32(2);
            w.u32(m.rows as u32);
            w.u32(m.cols as u32);
            w.f32s(&m.data);
        }
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "FMCKPT1");
        r.magic(FMCKPT_MAGIC)?;
        let n = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.bytes(n)?)?;
        let cfg = &header.config;
        cfg.validate()?;
        let template = MaeParams::<f32>::init(&cfg.model, &header.shape, 0)?;
        let mut params = template.clone();
        let mut m = template.clone();
        let mut v = template;
        let count = r.u32()? as usize;
        let expected = 3 * params.named().len();
        if count != expected {
            return Err(Error::Format(format!("FMCKPT1: {count} tensors, expected {expected}")));
        }
        for (prefix, p) in [("param", &mut params), ("adam_m", &mut m), ("adam_v", &mut v)] {
            for (name, t) in p.named_mut() {
                let want = format!("{prefix}/{name}");
                let got = r.string()?;
                if got != want {
                    return Err(Error::Format(format!("FMCKPT1: expected tensor {want}, found {got}")));
                }
                let rank = r.u32()? as usize;
                let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                if dims != [t.rows, t.cols] {
                    return Err(Error::Format(format!(
                        "FMCKPT1: {want} has dims {dims:?}, expected [{}, {}]",
                        t.rows, t.cols
                    )));
                }
                t.data = r.f32s(t.rows * t.cols)?;
            }
        }
        r.finish()?;
        let step = header.step;
        Ok(Self { header, params, state: AdamState { step, m, v } })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = Self::from_bytes(&read_file(path)?)?;
        log::info!("loaded checkpoint {} at step {}", path.display(), ck.header.step);
        Ok(ck)
    }
}
