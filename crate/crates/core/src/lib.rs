//! Gaze-guided masked video autoencoding for surgical phase recognition.
//!
//! The pipeline renders gaze samples into heatmaps ([`gaze`]), turns per-token
//! gaze mass into masking probabilities and samples token masks
//! ([`masking`]), pre-trains a video masked autoencoder on the masked
//! reconstruction objective ([`pretrain`]), then fine-tunes the encoder for
//! phase classification ([`finetune`]) and scores it with macro-averaged
//! metrics ([`metrics`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gaze;
pub mod geometry;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod schedule;
pub mod seed;

pub use error::{Error, Result};
