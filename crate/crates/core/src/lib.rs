//! Desk-scale video-grounded dialogue model.
//!
//! A from-scratch encoder-decoder language model is fused with two extra
//! evidence streams extracted from a synthetic video world: audio-visual
//! feature tracks at coarse and fine temporal granularity, and per-frame
//! scene graphs carried both in node form (encoder side) and in triplet
//! form (decoder side). A multi-pointer output layer mixes the two decoder
//! distributions. Everything runs on a small reverse-mode autodiff kernel
//! so gradients are checkable by finite differences end to end.

pub mod config;
pub mod data;
pub mod error;
pub mod gvp;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod pointer;
pub mod scenegraph;
pub mod tensor;
pub mod train;

pub use error::Error;
