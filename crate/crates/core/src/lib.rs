//! Channel-adaptive hyperspectral backbone: spectral tokenization, pseudo-mask supervision,
//! feature distillation and head-only adaptation, trainable on a single machine.

pub mod backbone;
pub mod cli;
mod codec;
pub mod cube;
pub mod decoder;
pub mod error;
mod layers;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod pseudolabel;
pub mod spectral_embed;

pub use error::{Error, Result};
