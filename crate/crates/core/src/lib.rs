//! Deepfake-video-detection framework built around a frozen toy
//! vision-language backbone: a forgery-mask perceiver, identity-aware
//! vision-language-alignment scoring, a joint training pipeline, a
//! procedural synthetic-forgery benchmark, and an evaluation kit.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod imgio;
pub mod nn;
pub mod params;
pub mod seeds;
pub mod perceiver;
pub mod pipeline;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod vla;

pub use error::{Error, Result};
pub use tensor::Tensor;
