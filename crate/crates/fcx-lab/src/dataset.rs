//! On-disk synthetic datasets: generation, reading, and statistics.
//!
//! Directory layout: `meta.json` (the generator configuration), one
//! `frames/{t:06}.bin` per time step (`C·H·W` little-endian `f32`,
//! channel-major), and optionally `stats.json` (per-channel mean/std over the
//! training split). Generation is a pure function of the metadata, so
//! regenerating with the same `meta` produces bit-identical files.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fcx_core::dynamics::{initial_field, make_velocity_field, step_state};
use fcx_core::sampler::FrameSource;
use fcx_core::{CoreError, NormStats};

use crate::error::{LabError, Result};

/// RNG stream id for the shared velocity field.
pub const STREAM_DATA_VEL: u64 = 10;
/// RNG stream id for per-channel initial conditions (substream = channel).
pub const STREAM_DATA_INIT: u64 = 11;

/// Everything needed to regenerate a dataset bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channel_names: Vec<String>,
    pub n_timesteps: usize,
    pub dt: f64,
    pub seed: u64,
    pub n_modes: usize,
    /// Max advection speed in cells per step.
    pub amplitude: f64,
    /// Diffusion coefficient.
    pub kappa: f64,
}

impl DatasetMeta {
    /// Desk-scale default: minutes to train on, nontrivial structure.
    pub fn desk_default(seed: u64) -> Self {
        Self {
            grid_h: 32,
            grid_w: 64,
            channel_names: vec!["za".into(), "ta".into(), "qa".into(), "pa".into()],
            n_timesteps: 2048,
            dt: 1.0,
            seed,
            n_modes: 3,
            amplitude: 0.8,
            kappa: 0.02,
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_timesteps < 2 {
            return Err(LabError::Config("dataset needs at least 2 time steps".into()));
        }
        if self.channel_names.is_empty() {
            return Err(LabError::Config("dataset needs at least one channel".into()));
        }
        if self.grid_h < 2 || self.grid_w < 2 {
            return Err(LabError::Config("grid must be at least 2x2".into()));
        }
        if !(self.dt > 0.0) || !(self.amplitude >= 0.0) || !(self.kappa >= 0.0) {
            return Err(LabError::Config("dt must be positive; amplitude/kappa nonnegative".into()));
        }
        if self.amplitude * self.dt > 2.0 {
            return Err(LabError::Config(
                "per-step displacement amplitude*dt must not exceed 2 cells".into(),
            ));
        }
        if self.n_modes < 1 {
            return Err(LabError::Config("need at least one stream-function mode".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.channels() * self.grid_h * self.grid_w
    }
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join("frames").join(format!("{:06}.bin", t))
}

/// Render a JSON value with every float printed at 17 significant digits
/// (exact `f64` round trip); integers and other scalars print as-is.
pub fn json_with_full_floats(v: &serde_json::Value) -> String {
    fn walk(v: &serde_json::Value, out: &mut String, indent: usize) {
        let pad = "  ".repeat(indent);
        match v {
            serde_json::Value::Number(n) => {
                if n.is_i64() || n.is_u64() {
                    out.push_str(&n.to_string());
                } else {
                    out.push_str(&format!("{:.16e}", n.as_f64().unwrap()));
                }
            }
            serde_json::Value::Array(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                    return;
                }
                out.push_str("[\n");
                for (i, item) in items.iter().enumerate() {
                    out.push_str(&pad);
                    out.push_str("  ");
                    walk(item, out, indent + 1);
                    if i + 1 < items.len() {
                        out.push(',');
                    }
                    out.push('\n');
                }
                out.push_str(&pad);
                out.push(']');
            }
            serde_json::Value::Object(map) => {
                if map.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push_str("{\n");
                for (i, (k, item)) in map.iter().enumerate() {
                    out.push_str(&pad);
                    out.push_str("  ");
                    out.push_str(&serde_json::Value::String(k.clone()).to_string());
                    out.push_str(": ");
                    walk(item, out, indent + 1);
                    if i + 1 < map.len() {
                        out.push(',');
                    }
                    out.push('\n');
                }
                out.push_str(&pad);
                out.push('}');
            }
            other => out.push_str(&other.to_string()),
        }
    }
    let mut s = String::new();
    walk(v, &mut s, 0);
    s.push('\n');
    s
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let v = serde_json::to_value(value).map_err(|e| LabError::Format(format!("encode: {}", e)))?;
    fs::write(path, json_with_full_floats(&v)).map_err(|e| LabError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| LabError::Format(format!("{}: {}", path.display(), e)))
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    pub meta: DatasetMeta,
}

/// Generate all frames under `dir`. Fails if the physics configuration is
/// unstable; overwrites existing frame files.
pub fn generate(meta: &DatasetMeta, dir: &Path) -> Result<Dataset> {
    meta.validate()?;
    let (h, w, c) = (meta.grid_h, meta.grid_w, meta.channels());
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| LabError::io(&frames_dir, e))?;

    let mut vel_rng = fcx_core::RngStream::new(meta.seed, STREAM_DATA_VEL);
    let vel = make_velocity_field(&mut vel_rng, h, w, meta.n_modes, meta.amplitude)?;

    let init_rng = fcx_core::RngStream::new(meta.seed, STREAM_DATA_INIT);
    let mut state: Vec<f64> = Vec::with_capacity(meta.frame_len());
    for ch in 0..c {
        state.extend(initial_field(&mut init_rng.substream(ch as u64), h, w, ch));
    }

    for t in 0..meta.n_timesteps {
        let mut bytes = Vec::with_capacity(state.len() * 4);
        for v in &state {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let p = frame_path(dir, t);
        fs::write(&p, &bytes).map_err(|e| LabError::io(&p, e))?;
        if t + 1 < meta.n_timesteps {
            state = step_state(&state, c, &vel, meta.dt, meta.kappa)?;
        }
    }
    write_json(&dir.join("meta.json"), meta)?;
    Ok(Dataset { dir: dir.to_path_buf(), meta: meta.clone() })
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = read_json(&dir.join("meta.json"))?;
        meta.validate()?;
        Ok(Self { dir: dir.to_path_buf(), meta })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// First 87.5% of time steps.
    pub fn train_range(&self) -> Range<usize> {
        0..self.meta.n_timesteps - self.meta.n_timesteps / 8
    }

    /// Held-out last 12.5% of time steps.
    pub fn test_range(&self) -> Range<usize> {
        self.meta.n_timesteps - self.meta.n_timesteps / 8..self.meta.n_timesteps
    }

    fn read_frame_f32(&self, t: usize) -> Result<Vec<f32>> {
        if t >= self.meta.n_timesteps {
            return Err(LabError::Config(format!("frame {} out of range", t)));
        }
        let p = frame_path(&self.dir, t);
        let bytes = fs::read(&p).map_err(|e| LabError::io(&p, e))?;
        if bytes.len() != self.meta.frame_len() * 4 {
            return Err(LabError::Integrity(format!(
                "frame {} has {} bytes, expected {}",
                t,
                bytes.len(),
                self.meta.frame_len() * 4
            )));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }

    /// Load a contiguous frame range into memory (frames are `f32` on disk;
    /// values are widened losslessly).
    pub fn load_range(&self, range: Range<usize>) -> Result<fcx_core::sampler::MemFrames> {
        if range.end > self.meta.n_timesteps || range.is_empty() {
            return Err(LabError::Config(format!(
                "frame range {:?} does not fit in 0..{}",
                range, self.meta.n_timesteps
            )));
        }
        let mut frames = Vec::with_capacity(range.len());
        for t in range {
            frames.push(self.read_frame_f32(t)?.into_iter().map(|x| x as f64).collect());
        }
        Ok(fcx_core::sampler::MemFrames::new(
            self.meta.channels(),
            self.meta.grid_h,
            self.meta.grid_w,
            frames,
        )?)
    }

    /// Load every frame into memory.
    pub fn load_all(&self) -> Result<fcx_core::sampler::MemFrames> {
        self.load_range(0..self.meta.n_timesteps)
    }

    /// Load only the training split.
    pub fn load_train(&self) -> Result<fcx_core::sampler::MemFrames> {
        self.load_range(self.train_range())
    }

    /// SHA-256 over `meta.json` followed by every frame file in time order.
    pub fn content_digest(&self) -> Result<String> {
        let mut hash = Sha256::new();
        let mp = self.dir.join("meta.json");
        hash.update(fs::read(&mp).map_err(|e| LabError::io(&mp, e))?);
        for t in 0..self.meta.n_timesteps {
            let p = frame_path(&self.dir, t);
            hash.update(fs::read(&p).map_err(|e| LabError::io(&p, e))?);
        }
        Ok(hex::encode(hash.finalize()))
    }

    pub fn stats_path(&self) -> PathBuf {
        self.dir.join("stats.json")
    }

    pub fn read_stats(&self) -> Result<NormStats> {
        let stats: NormStats = read_json(&self.stats_path())?;
        stats.validate(self.meta.channels()).map_err(LabError::Core)?;
        Ok(stats)
    }

    pub fn write_stats(&self, stats: &NormStats) -> Result<()> {
        stats.validate(self.meta.channels()).map_err(LabError::Core)?;
        write_json(&self.stats_path(), stats)
    }
}

impl FrameSource for Dataset {
    fn n_frames(&self) -> usize {
        self.meta.n_timesteps
    }

    fn channels(&self) -> usize {
        self.meta.channels()
    }

    fn grid(&self) -> (usize, usize) {
        (self.meta.grid_h, self.meta.grid_w)
    }

    fn read_frame(&self, t: usize, out: &mut [f64]) -> std::result::Result<(), CoreError> {
        let f = self
            .read_frame_f32(t)
            .map_err(|e| CoreError::InvalidConfig(format!("frame read failed: {}", e)))?;
        for (o, v) in out.iter_mut().zip(f) {
            *o = v as f64;
        }
        Ok(())
    }
}

/// Per-channel population mean and standard deviation over `range`.
pub fn compute_stats(src: &impl FrameSource, range: Range<usize>) -> Result<NormStats> {
    if range.is_empty() || range.end > src.n_frames() {
        return Err(LabError::Config(format!(
            "stats range {:?} invalid for {} frames",
            range,
            src.n_frames()
        )));
    }
    let c = src.channels();
    let (h, w) = src.grid();
    let plane = h * w;
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    let mut frame = vec![0.0f64; c * plane];
    let n = (range.len() * plane) as f64;
    for t in range {
        src.read_frame(t, &mut frame)?;
        for ch in 0..c {
            for v in &frame[ch * plane..(ch + 1) * plane] {
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
    }
    let mut mean = vec![0.0f64; c];
    let mut std = vec![0.0f64; c];
    for ch in 0..c {
        mean[ch] = sum[ch] / n;
        let var = (sq[ch] / n - mean[ch] * mean[ch]).max(0.0);
        std[ch] = var.sqrt();
        if !(std[ch] > 0.0) {
            return Err(LabError::Config(format!(
                "channel {} has zero variance over the stats range",
                ch
            )));
        }
    }
    let stats = NormStats { mean, std };
    stats.validate(c).map_err(LabError::Core)?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use fcx_core::sampler::MemFrames;

    fn tiny_meta(seed: u64) -> DatasetMeta {
        DatasetMeta {
            grid_h: 8,
            grid_w: 16,
            channel_names: vec!["a".into(), "b".into()],
            n_timesteps: 6,
            dt: 1.0,
            seed,
            n_modes: 2,
            amplitude: 0.8,
            kappa: 0.02,
        }
    }

    #[test]
    fn static_config_repeats_the_first_frame() {
        let dir = tempfile::tempdir().unwrap();
        let meta = DatasetMeta { amplitude: 0.0, kappa: 0.0, n_timesteps: 2, ..tiny_meta(3) };
        generate(&meta, dir.path()).unwrap();
        let f0 = fs::read(frame_path(dir.path(), 0)).unwrap();
        let f1 = fs::read(frame_path(dir.path(), 1)).unwrap();
        assert_eq!(f0, f1);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let meta = tiny_meta(42);
        let a = generate(&meta, d1.path()).unwrap();
        let b = generate(&meta, d2.path()).unwrap();
        assert_eq!(a.content_digest().unwrap(), b.content_digest().unwrap());
        // A different seed must change the bytes.
        let d3 = tempfile::tempdir().unwrap();
        let c = generate(&tiny_meta(43), d3.path()).unwrap();
        assert_ne!(a.content_digest().unwrap(), c.content_digest().unwrap());
    }

    #[test]
    fn channel_means_are_conserved_across_the_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let meta = DatasetMeta { n_timesteps: 40, ..tiny_meta(7) };
        let ds = generate(&meta, dir.path()).unwrap();
        let plane = meta.grid_h * meta.grid_w;
        let mut frame = vec![0.0f64; meta.frame_len()];
        ds.read_frame(0, &mut frame).unwrap();
        let first: Vec<f64> = (0..2)
            .map(|c| frame[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        for t in 1..meta.n_timesteps {
            ds.read_frame(t, &mut frame).unwrap();
            for c in 0..2 {
                let m = frame[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
                let rel = (m - first[c]).abs() / first[c].abs().max(1.0);
                assert!(rel < 1e-5, "t={} c={} rel drift {}", t, c, rel);
            }
        }
    }

    #[test]
    fn open_round_trips_meta_and_frames() {
        let dir = tempfile::tempdir().unwrap();
        let meta = tiny_meta(9);
        let ds = generate(&meta, dir.path()).unwrap();
        let reopened = Dataset::open(dir.path()).unwrap();
        assert_eq!(reopened.meta, meta);
        let mut a = vec![0.0f64; meta.frame_len()];
        let mut b = vec![0.0f64; meta.frame_len()];
        ds.read_frame(3, &mut a).unwrap();
        reopened.read_frame(3, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stats_formula_matches_hand_arithmetic() {
        // One frame, one channel, values {0, 1} equally: population mean 0.5,
        // population std 0.5.
        let frames = vec![vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0, 1.0]];
        let src = MemFrames::new(1, 2, 2, frames).unwrap();
        let stats = compute_stats(&src, 0..1).unwrap();
        assert!((stats.mean[0] - 0.5).abs() < 1e-15);
        assert!((stats.std[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_channel_is_rejected() {
        let frames = vec![vec![2.0; 4], vec![2.0; 4]];
        let src = MemFrames::new(1, 2, 2, frames).unwrap();
        let err = compute_stats(&src, 0..2).unwrap_err();
        assert!(format!("{}", err).contains("variance"));
    }

    #[test]
    fn stats_round_trip_is_exact_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&tiny_meta(5), dir.path()).unwrap();
        let stats = compute_stats(&ds, ds.train_range()).unwrap();
        ds.write_stats(&stats).unwrap();
        let back = ds.read_stats().unwrap();
        assert_eq!(stats.mean, back.mean);
        assert_eq!(stats.std, back.std);
        // Identical computation twice gives identical values.
        let again = compute_stats(&ds, ds.train_range()).unwrap();
        assert_eq!(stats.mean, again.mean);
    }

    #[test]
    fn split_ranges_cover_the_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let meta = DatasetMeta { n_timesteps: 64, ..tiny_meta(1) };
        let ds = generate(&meta, dir.path()).unwrap();
        assert_eq!(ds.train_range(), 0..56);
        assert_eq!(ds.test_range(), 56..64);
    }

    #[test]
    fn rejects_unstable_and_degenerate_configs() {
        assert!(DatasetMeta { amplitude: 3.0, ..tiny_meta(1) }.validate().is_err());
        assert!(DatasetMeta { n_timesteps: 1, ..tiny_meta(1) }.validate().is_err());
        assert!(DatasetMeta { channel_names: vec![], ..tiny_meta(1) }.validate().is_err());
    }
}
