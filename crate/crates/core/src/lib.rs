//! Trainable multi-channel speech front-ends.
//!
//! The crate provides a small reverse-mode autodiff engine ([`autodiff`]),
//! STFT feature extraction ([`features`]), classical and learnable
//! filter-and-sum beamformers ([`beamformer`]), the attention front-ends
//! including 2-D conv-attention ([`frontend`]), a synthetic multi-microphone
//! scene generator ([`synth`]) and the training harness ([`train`]).

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod beamformer;
pub mod error;
pub mod features;
pub mod frontend;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
