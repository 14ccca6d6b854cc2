//! Layer-wise anatomical attention bias for a small autoregressive
//! transformer decoder.
//!
//! Lung and heart masks are fused and smoothed into one Gaussian-blurred prior
//! per decoder layer ([`mask`]), turned into additive attention-logit biases
//! ([`bias`]) and injected into every layer of a from-scratch causal decoder
//! with a visual prefix ([`decoder`]). [`harness`] provides the synthetic
//! task and the three-way ablation.

pub mod bias;
pub mod decoder;
pub mod error;
pub mod formats;
pub mod harness;
pub mod mask;
pub mod numerics;

pub use bias::{BiasMatrix, BiasMode, BiasPlan, CausalMask, FlatMask};
pub use decoder::{DecoderConfig, DecoderModel, TrainConfig, VisualPrefix};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, ExperimentReport};
pub use mask::{BinaryMask, MaskStack, SmoothingSchedule};
pub use numerics::Matrix;
