//! RMSE evaluation: autoregressive rollout scoring on the held-out split,
//! CSV reports, and checkpoint comparison.
//!
//! Reports are deterministic: initial conditions are evenly spaced over the
//! test split, every reduction runs in fixed index order, and floats are
//! printed in round-trip form, so the same checkpoint always produces the
//! same CSV bytes.

use std::path::Path;

use fcx_core::metrics::rmse;
use fcx_core::params::ModelParams;
use fcx_core::rollout::rollout;
use fcx_core::sampler::{standardize, FrameSource};

use crate::dataset::Dataset;
use crate::error::{LabError, Result};

/// One report entry; `channel` is a dataset channel name or `"__avg__"`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub step: usize,
    pub channel: String,
    pub rmse: f64,
    pub n: usize,
}

pub const AVG_CHANNEL: &str = "__avg__";

/// Per-step, per-channel rollout RMSE in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub rows: Vec<ReportRow>,
}

impl RolloutReport {
    pub fn value_at(&self, step: usize, channel: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.step == step && r.channel == channel).map(|r| r.rmse)
    }

    pub fn avg_at(&self, step: usize) -> Option<f64> {
        self.value_at(step, AVG_CHANNEL)
    }

    pub fn steps(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for r in &self.rows {
            if out.last() != Some(&r.step) {
                out.push(r.step);
            }
        }
        out
    }

    /// Mean of the `__avg__` rows over an inclusive step range.
    pub fn mean_avg(&self, from: usize, to: usize) -> Option<f64> {
        let vals: Vec<f64> = (from..=to).map(|s| self.avg_at(s)).collect::<Option<_>>()?;
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,channel,rmse,n\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.channel, r.rmse, r.n));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "step,channel,rmse,n" {
                    return Err(LabError::Format(format!("unexpected report header {:?}", line)));
                }
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 4 {
                return Err(LabError::Format(format!("report line {} has {} cells", i + 1, cells.len())));
            }
            rows.push(ReportRow {
                step: cells[0]
                    .parse()
                    .map_err(|_| LabError::Format(format!("bad step {:?}", cells[0])))?,
                channel: cells[1].to_string(),
                rmse: cells[2]
                    .parse()
                    .map_err(|_| LabError::Format(format!("bad rmse {:?}", cells[2])))?,
                n: cells[3]
                    .parse()
                    .map_err(|_| LabError::Format(format!("bad count {:?}", cells[3])))?,
            });
        }
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| LabError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse_csv(&text)
    }
}

/// Default number of rollout initial conditions.
pub const DEFAULT_INITIAL_CONDITIONS: usize = 32;

/// Evenly spaced start frames `t0` such that `t0 + k_max` stays inside the
/// test split.
fn initial_conditions(ds: &Dataset, k_max: usize, n_ic: usize) -> Result<Vec<usize>> {
    let range = ds.test_range();
    if range.end - range.start < k_max + 1 {
        return Err(LabError::Config(format!(
            "test split of {} frames cannot score a {}-step rollout",
            range.end - range.start,
            k_max
        )));
    }
    let avail = range.end - k_max - range.start; // count of valid t0
    let n = n_ic.min(avail).max(1);
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let offset = if n == 1 { 0 } else { j * (avail - 1) / (n - 1) };
        out.push(range.start + offset);
    }
    out.dedup();
    Ok(out)
}

/// Standardized `f32` copy of frame `t`.
fn standardized_frame(
    ds: &Dataset,
    stats: &fcx_core::field::NormStats,
    t: usize,
) -> Result<Vec<f32>> {
    let c = ds.meta.channels();
    let (h, w) = (ds.meta.grid_h, ds.meta.grid_w);
    let mut frame = vec![0.0f64; c * h * w];
    ds.read_frame(t, &mut frame).map_err(LabError::Core)?;
    standardize(&mut frame, c, stats)?;
    Ok(frame.iter().map(|&x| x as f32).collect())
}

/// Score `k_max` rollout steps of `params` against ground truth, aggregated
/// jointly over initial conditions (sqrt of pooled mean squared error).
pub fn evaluate_rollout(
    params: &ModelParams<f32>,
    ds: &Dataset,
    k_max: usize,
    n_ic: usize,
) -> Result<RolloutReport> {
    evaluate_inner(Some(params), ds, k_max, n_ic)
}

/// The persistence baseline: every prediction is the initial frame.
pub fn persistence_report(ds: &Dataset, k_max: usize, n_ic: usize) -> Result<RolloutReport> {
    evaluate_inner(None, ds, k_max, n_ic)
}

fn evaluate_inner(
    params: Option<&ModelParams<f32>>,
    ds: &Dataset,
    k_max: usize,
    n_ic: usize,
) -> Result<RolloutReport> {
    if k_max < 1 {
        return Err(LabError::Config("rollout needs at least one step".into()));
    }
    if let Some(p) = params {
        if p.arch.channels != ds.meta.channels() {
            return Err(LabError::Config(format!(
                "model has {} channels, dataset {}",
                p.arch.channels,
                ds.meta.channels()
            )));
        }
    }
    let stats = ds.read_stats()?;
    let c = ds.meta.channels();
    let (h, w) = (ds.meta.grid_h, ds.meta.grid_w);
    let starts = initial_conditions(ds, k_max, n_ic)?;

    // Pooled squared error, indexed `[step][channel]`.
    let mut sq = vec![vec![0.0f64; c]; k_max];
    for &t0 in &starts {
        let x0 = standardized_frame(ds, &stats, t0)?;
        let states: Vec<Vec<f32>> = match params {
            Some(p) => rollout(p, &x0, c, h, w, k_max)?,
            None => vec![x0.clone(); k_max],
        };
        for (k, pred) in states.iter().enumerate() {
            let truth = standardized_frame(ds, &stats, t0 + k + 1)?;
            let per_channel = rmse(pred, &truth, 1, c, h, w, &stats)?;
            for (ch, r) in per_channel.iter().enumerate() {
                sq[k][ch] += r * r;
            }
        }
    }

    let n = starts.len();
    let mut rows = Vec::with_capacity(k_max * (c + 1));
    for (k, per_channel) in sq.iter().enumerate() {
        let mut vals = Vec::with_capacity(c);
        for (ch, total) in per_channel.iter().enumerate() {
            let v = (total / n as f64).sqrt();
            rows.push(ReportRow {
                step: k + 1,
                channel: ds.meta.channel_names[ch].clone(),
                rmse: v,
                n,
            });
            vals.push(v);
        }
        rows.push(ReportRow {
            step: k + 1,
            channel: AVG_CHANNEL.to_string(),
            rmse: vals.iter().sum::<f64>() / c as f64,
            n,
        });
    }
    Ok(RolloutReport { rows })
}

/// Side-by-side of two reports (`a` the baseline, `b` the candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct StepDelta {
    pub step: usize,
    pub avg_a: f64,
    pub avg_b: f64,
    /// `avg_b − avg_a`; negative means the candidate is better.
    pub delta: f64,
    pub gain: bool,
}

/// Verdicts for the two curriculum acceptance properties.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub deltas: Vec<StepDelta>,
    /// Candidate mean `__avg__` over steps `2..=horizon` is strictly lower.
    pub multi_step_gain: bool,
    /// Candidate step-1 `__avg__` within `forgetting_bound` of the baseline.
    pub forgetting_ok: bool,
    pub forgetting_ratio: f64,
}

/// Allowed relative single-step degradation after fine-tuning.
pub const FORGETTING_BOUND: f64 = 1.10;

pub fn compare_reports(a: &RolloutReport, b: &RolloutReport, horizon: usize) -> Result<Comparison> {
    let steps = a.steps();
    if steps != b.steps() {
        return Err(LabError::Config("reports cover different step ranges".into()));
    }
    if steps.is_empty() {
        return Err(LabError::Config("empty reports cannot be compared".into()));
    }
    let mut deltas = Vec::with_capacity(steps.len());
    for &s in &steps {
        let (av, bv) = match (a.avg_at(s), b.avg_at(s)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(LabError::Config(format!("step {} lacks an __avg__ row", s))),
        };
        deltas.push(StepDelta { step: s, avg_a: av, avg_b: bv, delta: bv - av, gain: bv < av });
    }
    let last = *steps.last().unwrap();
    let to = horizon.min(last);
    let multi_step_gain = if to >= 2 {
        match (a.mean_avg(2, to), b.mean_avg(2, to)) {
            (Some(ma), Some(mb)) => mb < ma,
            _ => false,
        }
    } else {
        false
    };
    let (a1, b1) = (a.avg_at(1).unwrap(), b.avg_at(1).unwrap());
    let forgetting_ratio = if a1 > 0.0 { b1 / a1 } else if b1 == a1 { 1.0 } else { f64::INFINITY };
    Ok(Comparison {
        deltas,
        multi_step_gain,
        forgetting_ok: forgetting_ratio <= FORGETTING_BOUND,
        forgetting_ratio,
    })
}
