//! Masked-autoencoder pretraining and axial-decoder forecasting for
//! multi-channel gridded weather fields, built from scratch on CPU.
//!
//! The pipeline: a synthetic (or pre-converted) gridded dataset is patchified
//! and embedded, a ViT encoder sees only the unmasked patches, and a decoder
//! whose self-attention runs along one axis of the patch grid reconstructs
//! the full field. The same encoder–decoder, run without masking, is
//! fine-tuned to map the state at one time-step to the next, then rolled out
//! autoregressively and scored with latitude-weighted ACC/RMSE against a
//! persistence baseline, optionally as a perturbed-initial-condition
//! ensemble.
//!
//! Start with the runnable programs in `examples/`; each one exercises a
//! single capability end to end. The `wmae` binary exposes the same flows as
//! subcommands for scripted runs.

pub mod data;
pub mod ensemble;
pub mod eval;
pub mod error;
pub mod model;
pub mod patches;
pub mod run;
pub mod tensor;
pub mod train;

pub use error::{Result, WmaeError};
