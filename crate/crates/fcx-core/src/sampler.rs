//! On-the-fly training-example construction.
//!
//! A training example is a random time step plus a random spatial crop, so the
//! effective corpus size is the product of the temporal and spatial choice
//! counts rather than the number of stored frames. Example `i` of a run is a
//! pure function of `(seed, i)` through a dedicated counter substream, which
//! lets any worker — local or remote — produce exactly the same example
//! without coordination.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::field::NormStats;
use crate::real::Real;
use crate::rng::RngStream;

/// RNG stream id reserved for example sampling.
pub const STREAM_SAMPLER: u64 = 1;

/// Full-grid and crop dimensions for spatial sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub full_h: usize,
    pub full_w: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

impl CropSpec {
    pub fn new(full_h: usize, full_w: usize, crop_h: usize, crop_w: usize) -> Result<Self, CoreError> {
        let s = Self { full_h, full_w, crop_h, crop_w };
        s.validate()?;
        Ok(s)
    }

    /// A crop covering the whole grid.
    pub fn full(h: usize, w: usize) -> Self {
        Self { full_h: h, full_w: w, crop_h: h, crop_w: w }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.crop_h < 1 || self.crop_w < 1 || self.crop_h > self.full_h || self.crop_w > self.full_w
        {
            return Err(CoreError::InvalidConfig(
                "crop must be at least 1x1 and fit inside the full grid".to_string(),
            ));
        }
        Ok(())
    }

    /// Number of distinct top-left origins (no wraparound).
    pub fn n_origins(&self) -> u64 {
        ((self.full_h - self.crop_h + 1) as u64) * ((self.full_w - self.crop_w + 1) as u64)
    }
}

/// Total count of distinct (time step, crop origin) training examples.
pub fn count_examples(
    n_years: u64,
    steps_per_day: u64,
    days_per_year: u64,
    full: (u64, u64),
    crop: (u64, u64),
) -> Result<u64, CoreError> {
    if crop.0 < 1 || crop.1 < 1 || crop.0 > full.0 || crop.1 > full.1 {
        return Err(CoreError::InvalidConfig("crop does not fit in full grid".to_string()));
    }
    let oh = full.0 - crop.0 + 1;
    let ow = full.1 - crop.1 + 1;
    n_years
        .checked_mul(steps_per_day)
        .and_then(|x| x.checked_mul(days_per_year))
        .and_then(|x| x.checked_mul(oh))
        .and_then(|x| x.checked_mul(ow))
        .ok_or_else(|| CoreError::InvalidConfig("example count overflows u64".to_string()))
}

/// Standardize a `(C, h, w)` channel-major array in place: `(x − mean) / std`.
pub fn standardize<F: Real>(x: &mut [F], channels: usize, stats: &NormStats) -> Result<(), CoreError> {
    stats.validate(channels)?;
    if channels == 0 || x.len() % channels != 0 {
        return Err(CoreError::ShapeMismatch("array is not channel-major (C,h,w)".to_string()));
    }
    let plane = x.len() / channels;
    for c in 0..channels {
        let m = stats.mean[c];
        let s = stats.std[c];
        for v in &mut x[c * plane..(c + 1) * plane] {
            *v = F::of((v.as_f64() - m) / s);
        }
    }
    Ok(())
}

/// Inverse of [`standardize`]: `z·std + mean`.
pub fn unstandardize<F: Real>(z: &mut [F], channels: usize, stats: &NormStats) -> Result<(), CoreError> {
    stats.validate(channels)?;
    if channels == 0 || z.len() % channels != 0 {
        return Err(CoreError::ShapeMismatch("array is not channel-major (C,h,w)".to_string()));
    }
    let plane = z.len() / channels;
    for c in 0..channels {
        let m = stats.mean[c];
        let s = stats.std[c];
        for v in &mut z[c * plane..(c + 1) * plane] {
            *v = F::of(v.as_f64() * s + m);
        }
    }
    Ok(())
}

/// Read access to an immutable trajectory of `(C, H, W)` frames.
pub trait FrameSource {
    fn n_frames(&self) -> usize;
    fn channels(&self) -> usize;
    fn grid(&self) -> (usize, usize);
    /// Copy frame `t` (channel-major, physical units) into `out`.
    fn read_frame(&self, t: usize, out: &mut [f64]) -> Result<(), CoreError>;
}

/// All frames held in memory; the reference [`FrameSource`].
#[derive(Debug, Clone)]
pub struct MemFrames {
    channels: usize,
    h: usize,
    w: usize,
    frames: Vec<Vec<f64>>,
}

impl MemFrames {
    pub fn new(channels: usize, h: usize, w: usize, frames: Vec<Vec<f64>>) -> Result<Self, CoreError> {
        if frames.len() < 2 {
            return Err(CoreError::InvalidConfig("a trajectory needs at least 2 frames".to_string()));
        }
        for (t, f) in frames.iter().enumerate() {
            if f.len() != channels * h * w {
                return Err(CoreError::ShapeMismatch(alloc::format!(
                    "frame {} has {} values, expected {}",
                    t,
                    f.len(),
                    channels * h * w
                )));
            }
        }
        Ok(Self { channels, h, w, frames })
    }
}

impl FrameSource for MemFrames {
    fn n_frames(&self) -> usize {
        self.frames.len()
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn grid(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn read_frame(&self, t: usize, out: &mut [f64]) -> Result<(), CoreError> {
        let f = self
            .frames
            .get(t)
            .ok_or_else(|| CoreError::InvalidConfig(alloc::format!("frame {} out of range", t)))?;
        out.copy_from_slice(f);
        Ok(())
    }
}

/// One standardized training example: an input crop and `K` consecutive
/// future crops at the same origin, plus the identifiers that reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub input: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub t0: usize,
    pub origin: (usize, usize),
    pub rng_key: u64,
    pub rng_counter: u64,
}

fn crop_frame(
    frame: &[f64],
    channels: usize,
    full_w: usize,
    origin: (usize, usize),
    ch: usize,
    cw: usize,
) -> Vec<f64> {
    let plane = frame.len() / channels;
    let mut out = Vec::with_capacity(channels * ch * cw);
    for c in 0..channels {
        let base = c * plane;
        for y in 0..ch {
            let row = base + (origin.0 + y) * full_w + origin.1;
            out.extend_from_slice(&frame[row..row + cw]);
        }
    }
    out
}

/// Draw one example from `src` using `rng` (consumed): a uniform time step
/// `t0 ∈ [0, T−K−1]` and a uniform top-left crop origin, shared by the input
/// and every target.
pub fn sample_example<S: FrameSource>(
    mut rng: RngStream,
    src: &S,
    stats: &NormStats,
    crop: &CropSpec,
    horizon: usize,
) -> Result<TrainExample, CoreError> {
    crop.validate()?;
    let channels = src.channels();
    let (full_h, full_w) = src.grid();
    if (full_h, full_w) != (crop.full_h, crop.full_w) {
        return Err(CoreError::ShapeMismatch("crop spec grid does not match source".to_string()));
    }
    let t_total = src.n_frames();
    if horizon < 1 || horizon + 1 > t_total {
        return Err(CoreError::InvalidConfig(alloc::format!(
            "horizon {} needs {} frames, source has {}",
            horizon,
            horizon + 1,
            t_total
        )));
    }
    let rng_key = rng.key();
    let rng_counter = rng.counter();
    let t0 = rng.below((t_total - horizon) as u64) as usize;
    let oi = rng.below((full_h - crop.crop_h + 1) as u64) as usize;
    let oj = rng.below((full_w - crop.crop_w + 1) as u64) as usize;

    let mut frame = vec![0.0f64; channels * full_h * full_w];
    src.read_frame(t0, &mut frame)?;
    let mut input = crop_frame(&frame, channels, full_w, (oi, oj), crop.crop_h, crop.crop_w);
    standardize(&mut input, channels, stats)?;
    let mut targets = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        src.read_frame(t0 + k, &mut frame)?;
        let mut t = crop_frame(&frame, channels, full_w, (oi, oj), crop.crop_h, crop.crop_w);
        standardize(&mut t, channels, stats)?;
        targets.push(t);
    }
    Ok(TrainExample { input, targets, t0, origin: (oi, oj), rng_key, rng_counter })
}

/// Canonical example `index` of a run: a pure function of `(seed, index)`.
pub fn example_for_index<S: FrameSource>(
    seed: u64,
    index: u64,
    src: &S,
    stats: &NormStats,
    crop: &CropSpec,
    horizon: usize,
) -> Result<TrainExample, CoreError> {
    let rng = RngStream::new(seed, STREAM_SAMPLER).substream(index);
    sample_example(rng, src, stats, crop, horizon)
}
