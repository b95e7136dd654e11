//! Single-step pretraining: the stage-one loop tying data, model, and
//! optimizer together.
//!
//! The whole loop is deterministic given a `RunConfig`: parameter init comes
//! from a dedicated RNG stream, the example stream is a pure function of the
//! seed, and every floating-point reduction has a fixed order. Two runs with
//! the same config produce identical metric logs (minus wall time) and
//! identical checkpoint digests.

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fcx_core::loss::batch_loss_grads;
use fcx_core::optim::{lamb_step, BatchSchedule, CosineSchedule, LambConfig, LambState};
use fcx_core::params::ModelParams;
use fcx_core::rng::RngStream;
use fcx_core::sampler::CropSpec;

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::dataset::{compute_stats, Dataset};
use crate::error::{LabError, Result};
use crate::pool::{
    next_batch, ExampleSource, LocalSource, PoolConfig, PrefetchSource, WorkerPool,
};

/// RNG stream id reserved for parameter initialization.
pub const STREAM_INIT: u64 = 2;

/// One row of the training metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub loss: f64,
    pub seconds: f64,
}

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,lr,batch_size,loss,seconds\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.lr, r.batch_size, r.loss, r.seconds));
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, metrics_to_csv(rows)).map_err(|e| LabError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "step,lr,batch_size,loss,seconds" {
                return Err(LabError::Format(format!("unexpected metrics header {:?}", line)));
            }
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(LabError::Format(format!("metrics line {} has {} cells", i + 1, cells.len())));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| LabError::Format(format!("bad float {:?} on line {}", s, i + 1)))
        };
        rows.push(MetricRow {
            step: cells[0]
                .parse()
                .map_err(|_| LabError::Format(format!("bad step {:?} on line {}", cells[0], i + 1)))?,
            lr: parse_f(cells[1])?,
            batch_size: cells[2]
                .parse()
                .map_err(|_| LabError::Format(format!("bad batch {:?} on line {}", cells[2], i + 1)))?,
            loss: parse_f(cells[3])?,
            seconds: parse_f(cells[4])?,
        });
    }
    Ok(rows)
}

/// What a finished (or aborted-after-N-steps) pretraining run hands back.
#[derive(Debug)]
pub struct PretrainOutcome {
    /// Directory of the final checkpoint.
    pub checkpoint_dir: PathBuf,
    /// Digest of the final checkpoint.
    pub digest: String,
    pub rows: Vec<MetricRow>,
    /// Median training loss over the final window (up to 200 steps).
    pub final_loss: f64,
    /// Median persistence loss (predict input unchanged) over the same window.
    pub persistence_loss: f64,
}

fn parse_worker_addrs(workers: &[String]) -> Result<Vec<SocketAddr>> {
    let mut out = Vec::with_capacity(workers.len());
    for w in workers {
        let mut it = w
            .to_socket_addrs()
            .map_err(|e| LabError::Config(format!("worker address {:?}: {}", w, e)))?;
        out.push(
            it.next()
                .ok_or_else(|| LabError::Config(format!("worker address {:?} resolves to nothing", w)))?,
        );
    }
    Ok(out)
}

/// Open the dataset named by the config and build the configured example
/// stream (local sampling or worker pool), prefetch included. Also returns
/// the dataset handle for callers that need stats or held-out frames.
pub fn build_source(cfg: &RunConfig, horizon: usize) -> Result<(Box<dyn ExampleSource + Send>, Dataset)> {
    let data_dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| LabError::Config("run config needs data_dir".into()))?;
    let ds = Dataset::open(data_dir)?;
    if ds.meta.channels() != cfg.arch.channels
        || (ds.meta.grid_h, ds.meta.grid_w) != (cfg.arch.grid_h, cfg.arch.grid_w)
    {
        return Err(LabError::Config(format!(
            "dataset is {} channels on {}x{}, model wants {} on {}x{}",
            ds.meta.channels(),
            ds.meta.grid_h,
            ds.meta.grid_w,
            cfg.arch.channels,
            cfg.arch.grid_h,
            cfg.arch.grid_w
        )));
    }
    let (crop_h, crop_w) = cfg.crop_dims();
    let inner: Box<dyn ExampleSource + Send> = if cfg.workers.is_empty() {
        let stats = ds.read_stats()?;
        let crop = CropSpec::new(ds.meta.grid_h, ds.meta.grid_w, crop_h, crop_w)?;
        Box::new(LocalSource::new(ds.load_train()?, stats, crop, horizon, cfg.seed))
    } else {
        let addrs = parse_worker_addrs(&cfg.workers)?;
        let digest = ds.content_digest()?;
        let pool_cfg = PoolConfig::new(cfg.seed, horizon, cfg.arch.channels, (crop_h, crop_w));
        Box::new(WorkerPool::connect(&addrs, &digest, pool_cfg)?)
    };
    let max_batch = cfg.batch_schedule.iter().map(|&(_, b)| b).max().unwrap_or(1);
    let depth = cfg.prefetch_batches * max_batch;
    Ok((Box::new(PrefetchSource::new(inner, depth)), ds))
}

/// Median over the trailing `window` values. Batch losses are heavy-tailed —
/// position-ambiguous crops produce occasional losses orders of magnitude
/// above typical — so a robust location beats a mean for "final loss".
fn median_tail(values: &[f64], window: usize) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let n = values.len().min(window);
    let mut tail = values[values.len() - n..].to_vec();
    tail.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        tail[n / 2]
    } else {
        (tail[n / 2 - 1] + tail[n / 2]) / 2.0
    }
}

fn persistence_mse(inputs: &fcx_core::field::FieldBatch<f32>, targets: &fcx_core::field::FieldBatch<f32>) -> f64 {
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for b in 0..inputs.batch {
        for (x, y) in inputs.example(b).iter().zip(targets.example(b)) {
            let r = *x as f64 - *y as f64;
            acc += r * r;
            count += 1;
        }
    }
    acc / count as f64
}

/// Ensure the dataset has stats on disk, computing them from the training
/// split when missing.
pub fn ensure_stats(ds: &Dataset) -> Result<()> {
    if ds.stats_path().exists() {
        return Ok(());
    }
    let stats = compute_stats(ds, ds.train_range())?;
    ds.write_stats(&stats)
}

/// Run stage-one pretraining; returns the final checkpoint and loss summary.
pub fn pretrain(cfg: &RunConfig, out_dir: &Path) -> Result<PretrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;
    cfg.save(&out_dir.join("config.json"))?;

    let (mut src, _ds) = build_source(cfg, 1)?;
    let names: Vec<String> = (0..cfg.arch.channels).map(|c| format!("c{}", c)).collect();

    let mut params =
        ModelParams::<f32>::init(&cfg.arch, &mut RngStream::new(cfg.seed, STREAM_INIT));
    let lamb_cfg = LambConfig { weight_decay: cfg.weight_decay, ..LambConfig::default() };
    let mut opt = LambState::new(&params, lamb_cfg)?;
    let batch_sched = BatchSchedule::new(cfg.batch_schedule.clone())?;

    let start = Instant::now();
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut losses: Vec<f64> = Vec::new();
    let mut persists: Vec<f64> = Vec::new();
    let mut last_good: Option<PathBuf> = None;

    if cfg.max_steps > 0 {
        let lr_sched = CosineSchedule::new(cfg.lr_init, cfg.lr_final, cfg.max_steps)?;
        for t in 0..cfg.max_steps {
            let b = batch_sched.size_at(t);
            let lr = lr_sched.lr_at(t);
            let (inputs, targets) = next_batch(&mut src, b, &names)?;
            let mut grads = params.zeros_like();
            let loss = batch_loss_grads(&params, &inputs, &targets[0], &mut grads)?;
            if !loss.is_finite() {
                write_metrics(&out_dir.join("metrics.csv"), &rows)?;
                let kept = last_good
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".into());
                return Err(LabError::Training(format!(
                    "non-finite loss at step {}; last good checkpoint: {}",
                    t + 1,
                    kept
                )));
            }
            lamb_step(&mut params, &grads, &mut opt, lr)?;
            losses.push(loss);
            persists.push(persistence_mse(&inputs, &targets[0]));

            let step = t + 1;
            if t % cfg.log_every == 0 || step == cfg.max_steps {
                rows.push(MetricRow {
                    step,
                    lr,
                    batch_size: b,
                    loss,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            if step % cfg.checkpoint_every == 0 && step != cfg.max_steps {
                let dir = out_dir.join(format!("ckpt_{:06}", step));
                save_checkpoint(&params, &dir)?;
                last_good = Some(dir);
            }
        }
    }

    let final_dir = out_dir.join("ckpt_final");
    let digest = save_checkpoint(&params, &final_dir)?;
    write_metrics(&out_dir.join("metrics.csv"), &rows)?;
    Ok(PretrainOutcome {
        checkpoint_dir: final_dir,
        digest,
        rows,
        final_loss: median_tail(&losses, 200),
        persistence_loss: median_tail(&persists, 200),
    })
}
