//! Run configuration: one JSON file defining a whole training run.
//!
//! The resolved config is echoed verbatim into every output directory so any
//! checkpoint can be traced back to the exact settings that produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fcx_core::ArchConfig;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Dataset directory (in-process sampling) — ignored by workers when
    /// `workers` is nonempty except for digest verification.
    pub data_dir: Option<PathBuf>,
    /// Remote worker addresses (`host:port`); empty means sample in-process.
    pub workers: Vec<String>,
    pub arch: ArchConfig,
    pub max_steps: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    /// `(start_step, batch_size)` pairs, first start must be 0.
    pub batch_schedule: Vec<(u64, usize)>,
    /// Spatial crop; `None` trains on the full model grid. Crops must be
    /// patch-tiled and no larger than the grid.
    pub crop: Option<(usize, usize)>,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Bounded prefetch depth, in batches.
    pub prefetch_batches: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            workers: Vec::new(),
            arch: ArchConfig::desk_default(),
            max_steps: 2000,
            lr_init: 3e-3,
            lr_final: 3e-4,
            weight_decay: 0.0,
            batch_schedule: vec![(0, 4), (12000, 8)],
            crop: None,
            seed: 0,
            log_every: 50,
            checkpoint_every: 500,
            prefetch_batches: 4,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate().map_err(LabError::Core)?;
        if let Some((ch, cw)) = self.crop {
            // Same contract the model enforces: patch-tiled and within the
            // grid the positional embedding covers.
            self.arch.token_dims(ch, cw).map_err(LabError::Core)?;
        }
        if self.lr_init <= 0.0 || self.lr_final < 0.0 {
            return Err(LabError::Config("learning rates must be positive".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(LabError::Config("log/checkpoint cadences must be at least 1".into()));
        }
        if self.prefetch_batches == 0 {
            return Err(LabError::Config("prefetch depth must be at least 1".into()));
        }
        fcx_core::optim::BatchSchedule::new(self.batch_schedule.clone())
            .map_err(LabError::Core)?;
        Ok(())
    }

    /// Crop dimensions the run actually uses.
    pub fn crop_dims(&self) -> (usize, usize) {
        self.crop.unwrap_or((self.arch.grid_h, self.arch.grid_w))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        let cfg: Self = serde_json::from_slice(&bytes)
            .map_err(|e| LabError::Config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let v = serde_json::to_value(self)
            .map_err(|e| LabError::Format(format!("config encode: {}", e)))?;
        std::fs::write(path, crate::dataset::json_with_full_floats(&v))
            .map_err(|e| LabError::io(path, e))
    }
}

/// Settings for multi-step curriculum fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub max_time_steps: usize,
    pub steps_per_increment: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            max_time_steps: 4,
            steps_per_increment: 300,
            lr_init: 1e-4,
            lr_final: 1e-5,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_time_steps < 1 {
            return Err(LabError::Config("curriculum needs at least one increment".into()));
        }
        if self.steps_per_increment < 1 || self.batch_size < 1 {
            return Err(LabError::Config("increment steps and batch size must be positive".into()));
        }
        if self.lr_init <= 0.0 || self.lr_final < 0.0 {
            return Err(LabError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}
