//! Batched physical fields and their normalization statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::real::Real;

/// A batch of gridded states, laid out `(B, C, H, W)` row-major.
///
/// Construction validates the shape contract once so downstream layers can
/// index without re-checking: every dim ≥ 1, H and W even, data finite.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldBatch<F> {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub channel_names: Vec<String>,
    data: Vec<F>,
}

impl<F: Real> FieldBatch<F> {
    pub fn new(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        channel_names: Vec<String>,
        data: Vec<F>,
    ) -> Result<Self, CoreError> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "field batch dims must be >= 1, got ({batch}, {channels}, {height}, {width})"
            )));
        }
        if height % 2 != 0 || width % 2 != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "grid dims must be even, got {height}x{width}"
            )));
        }
        if channel_names.len() != channels {
            return Err(CoreError::ShapeMismatch(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                channels
            )));
        }
        let want = batch * channels * height * width;
        if data.len() != want {
            return Err(CoreError::ShapeMismatch(format!(
                "field batch wants {want} elements, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(CoreError::NonFinite("field batch data".into()));
        }
        Ok(FieldBatch { batch, channels, height, width, channel_names, data })
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Flat slice of one example `(C, H, W)`.
    pub fn example(&self, b: usize) -> &[F] {
        let n = self.channels * self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn example_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Per-channel normalization statistics in physical units.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn validate(&self, channels: usize) -> Result<(), CoreError> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(CoreError::ShapeMismatch(format!(
                "stats cover {}/{} channels, model wants {channels}",
                self.mean.len(),
                self.std.len()
            )));
        }
        for (c, (&m, &s)) in self.mean.iter().zip(&self.std).enumerate() {
            if !m.is_finite() || !s.is_finite() {
                return Err(CoreError::NonFinite(format!("stats for channel {c}")));
            }
            if s <= 0.0 {
                return Err(CoreError::InvalidConfig(format!(
                    "channel {c} std must be > 0, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Stats that make standardization the identity; handy in tests.
    pub fn identity(channels: usize) -> Self {
        NormStats {
            mean: alloc::vec![0.0; channels],
            std: alloc::vec![1.0; channels],
        }
    }
}
