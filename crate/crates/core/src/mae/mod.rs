//! Spatiotemporal masked autoencoder over flat-map clips.

mod checkpoint;
mod config;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CheckpointHeader, FMCKPT_MAGIC};
pub use config::{decoder_param_count, encoder_param_count, param_count, MaeConfig, ModelShape};
pub use model::{encode, forward, loss_and_grad, reconstruct, reconstruction_loss, MaeParams};
pub use optim::{lr_at, AdamState, AdamW};
pub use train::{mask_for, TrainConfig, Trainer};
