//! Multi-task semantic communication simulator.
//!
//! The crate models a transmitter that fuses image, text and audio inputs into
//! one semantic vector, sends it through a variable-rate joint source-channel
//! code over a Rician/AWGN channel, and a receiver that serves several task
//! decoders from that single transmission. Around the pipeline sit the pieces
//! needed to deploy and adapt it at the network edge:
//!
//! - [`nn`]: f64 tensors, tape autodiff, dense and low-rank adapter layers.
//! - [`channel`]: power normalisation, Rician block fading, equalisation.
//! - [`transmission`]: importance scoring and symbol-budget allocation.
//! - [`model`]: encoders, fusion, JSC codec, task heads and the end-to-end pipeline.
//! - [`compression`]: magnitude pruning, uniform quantisation, plan search.
//! - [`federation`]: split fine-tuning between clients and an edge server.
//! - [`rag`]: exact-search vector knowledge bases and gated augmentation.
//! - [`experiments`]: synthetic data, metrics, baselines and SNR sweeps.

pub mod channel;
pub mod compression;
pub mod error;
pub mod experiments;
pub mod federation;
pub mod model;
pub mod nn;
pub mod rag;
pub mod transmission;

pub use error::{Error, Result};
