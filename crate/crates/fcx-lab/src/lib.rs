//! Training laboratory around `fcx-core`: on-disk datasets, checkpoints,
//! networked data workers, training loops, evaluation reports, ablations,
//! and the `fcx` command-line tool.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evalrep;
pub mod finetune;
pub mod pool;
pub mod proto;
pub mod trainer;
pub mod worker;

pub use error::{LabError, Result};
