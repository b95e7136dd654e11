//! Core numerics for a desk-scale spectral forecaster.
//!
//! Everything in this crate is `no_std + alloc`: plain tensors, a counter-based
//! RNG, an FFT, the spectral-transformer forward/backward passes, the warp
//! composition, the optimizer, the example sampler, and the synthetic advection
//! dynamics used to manufacture training data. File formats, sockets, and
//! training loops live in the companion `fcx-lab` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod arch;
pub mod dynamics;
pub mod error;
pub mod fft;
pub mod field;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod rollout;
pub mod sampler;
pub mod tensor;
pub mod warp;

pub use arch::{ArchConfig, FlowMode, NormMode};
pub use error::CoreError;
pub use field::{FieldBatch, NormStats};
pub use params::ModelParams;
pub use real::Real;
pub use rng::RngStream;
pub use tensor::Tensor;
