//! SegSR: coupled image and segmentation diffusion for toy-scale super-resolution.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dmb;
pub mod metrics;
pub mod error;
pub mod eval;
pub mod networks;
pub mod nn;
pub mod sampler;
pub mod schedules;
pub mod segdm;
pub mod selftest;
pub mod srdm;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
