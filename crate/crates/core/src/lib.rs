//! Flat-map fMRI masked autoencoding.
//!
//! Cortical-surface time series are resampled onto a regular 2D flat-map
//! grid, cut into spacetime patches with entirely-background patches
//! dropped, and fed to a small masked-autoencoder vision transformer
//! trained with a valid-pixel MSE. Frozen-encoder probes, connectome
//! baselines and power-law scaling fits cover the evaluation side.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod data;
pub mod error;
pub mod evalprobe;
pub mod flatgeo;
pub mod mae;
pub mod nn;
pub mod prep;
pub mod render;
pub mod rng;
pub mod scalefit;
pub mod synth;
pub mod token;

pub use error::{Error, Result};
