//! The `fcx` command-line tool: one subcommand per pipeline stage.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, bad config), 2 for
//! runtime failures. Every run echoes its resolved configuration into the
//! output directory, so a result directory is self-describing.

use std::ffi::OsString;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use fcx_core::gradcheck::{grad_check, tiny_arch, GradCheckSettings};

use crate::ablate::{run_ablation, AblationSpec};
use crate::checkpoint::load_checkpoint;
use crate::config::{CurriculumConfig, RunConfig};
use crate::dataset::{compute_stats, generate, Dataset, DatasetMeta};
use crate::error::{LabError, Result};
use crate::evalrep::{evaluate_rollout, DEFAULT_INITIAL_CONDITIONS};
use crate::finetune::curriculum_finetune;
use crate::trainer::pretrain;
use crate::worker::{serve, WorkerContext};

#[derive(Parser, Debug)]
#[command(name = "fcx", version, about = "Spectral-transformer training laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_dims(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once('x').ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|e| format!("bad height in {s:?}: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("bad width in {s:?}: {e}"))?;
    Ok((h, w))
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic advection dataset.
    GenData {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Grid size as HxW.
        #[arg(long, value_parser = parse_dims)]
        grid: Option<(usize, usize)>,
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        /// Max advection speed in cells per step.
        #[arg(long)]
        amplitude: Option<f64>,
        /// Diffusion coefficient.
        #[arg(long)]
        kappa: Option<f64>,
        /// Stream-function Fourier modes per axis.
        #[arg(long)]
        modes: Option<usize>,
    },
    /// Compute and write per-channel training-split statistics.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Serve training examples over TCP until killed.
    Worker {
        #[arg(long)]
        data: PathBuf,
        /// Listen address, e.g. 127.0.0.1:7700.
        #[arg(long)]
        listen: String,
        /// Crop size as HxW; defaults to the full grid.
        #[arg(long, value_parser = parse_dims)]
        crop: Option<(usize, usize)>,
    },
    /// Train from scratch per a run-config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Worker addresses; overrides the config when given.
        #[arg(long, value_delimiter = ',')]
        workers: Vec<String>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config step budget.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Overrides the config dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Curriculum fine-tuning from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Pretrained checkpoint directory.
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Final rollout horizon; one increment per step.
        #[arg(long, default_value_t = CurriculumConfig::default().max_time_steps)]
        max_steps: usize,
        #[arg(long, default_value_t = CurriculumConfig::default().steps_per_increment)]
        steps_per_increment: u64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Roll out a checkpoint on the held-out split and write a report CSV.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Rollout depth in steps.
        #[arg(long)]
        rollout: usize,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Number of held-out initial conditions.
        #[arg(long, default_value_t = DEFAULT_INITIAL_CONDITIONS)]
        ics: usize,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Run a multi-seed ablation study from a spec file.
    Ablate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse and dispatch; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fcx: error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, seed, grid, timesteps, channels, amplitude, kappa, modes } => {
            let mut meta = DatasetMeta::desk_default(seed);
            if let Some((h, w)) = grid {
                meta.grid_h = h;
                meta.grid_w = w;
            }
            if let Some(t) = timesteps {
                meta.n_timesteps = t;
            }
            if let Some(c) = channels {
                if c != meta.channel_names.len() {
                    meta.channel_names = (0..c).map(|i| format!("c{i}")).collect();
                }
            }
            if let Some(a) = amplitude {
                meta.amplitude = a;
            }
            if let Some(k) = kappa {
                meta.kappa = k;
            }
            if let Some(m) = modes {
                meta.n_modes = m;
            }
            let ds = generate(&meta, &out)?;
            println!(
                "generated {} frames of {}x{}x{} at {}",
                meta.n_timesteps,
                meta.channels(),
                meta.grid_h,
                meta.grid_w,
                out.display()
            );
            println!("content digest {}", ds.content_digest()?);
            Ok(())
        }
        Command::Stats { data } => {
            let ds = Dataset::open(&data)?;
            let stats = compute_stats(&ds, ds.train_range())?;
            ds.write_stats(&stats)?;
            for (i, name) in ds.meta.channel_names.iter().enumerate() {
                println!("{}: mean {:+.9e} std {:.9e}", name, stats.mean[i], stats.std[i]);
            }
            println!("wrote {}", ds.stats_path().display());
            Ok(())
        }
        Command::Worker { data, listen, crop } => {
            let ctx = Arc::new(WorkerContext::load(&data, crop)?);
            let listener = std::net::TcpListener::bind(&listen)
                .map_err(|e| LabError::Config(format!("cannot listen on {listen}: {e}")))?;
            let addr = listener.local_addr().map_err(|e| LabError::io(&data, e))?;
            let (ch, cw) = (ctx.crop.crop_h, ctx.crop.crop_w);
            println!("worker listening on {addr} (crop {ch}x{cw}, digest {})", ctx.digest);
            serve(ctx, listener, Arc::new(AtomicBool::new(false)))
        }
        Command::Pretrain { config, out, workers, seed, max_steps, data } => {
            let mut cfg = RunConfig::load(&config)?;
            if !workers.is_empty() {
                cfg.workers = workers;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = max_steps {
                cfg.max_steps = n;
            }
            if let Some(d) = data {
                cfg.data_dir = Some(d);
            }
            let outcome = pretrain(&cfg, &out)?;
            println!(
                "pretrained {} steps: final loss {:.6}, persistence {:.6}",
                cfg.max_steps, outcome.final_loss, outcome.persistence_loss
            );
            println!("checkpoint {} digest {}", outcome.checkpoint_dir.display(), outcome.digest);
            Ok(())
        }
        Command::Finetune { config, init, out, max_steps, steps_per_increment, seed } => {
            let run_cfg = RunConfig::load(&config)?;
            let mut cur = CurriculumConfig {
                max_time_steps: max_steps,
                steps_per_increment,
                ..CurriculumConfig::default()
            };
            if let Some(s) = seed {
                cur.seed = s;
            }
            let outcome = curriculum_finetune(&run_cfg, &cur, &init, &out)?;
            for rec in &outcome.increments {
                println!("increment {}: teacher digest {}", rec.increment, rec.teacher_digest);
            }
            println!("checkpoint {} digest {}", outcome.checkpoint_dir.display(), outcome.digest);
            Ok(())
        }
        Command::Eval { ckpt, data, rollout, out, ics } => {
            let params = load_checkpoint(&ckpt)?;
            let ds = Dataset::open(&data)?;
            let report = evaluate_rollout(&params, &ds, rollout, ics)?;
            report.write(&out)?;
            for step in report.steps() {
                if let Some(avg) = report.avg_at(step) {
                    println!("step {step}: avg rmse {avg:.6}");
                }
            }
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Gradcheck { tol, seed } => {
            let settings = GradCheckSettings { tol, ..GradCheckSettings::default() };
            let report = grad_check(&tiny_arch(), seed, &settings)?;
            for g in &report.groups {
                println!(
                    "{:<24} rel {:.3e} zero-abs {:.3e} over {:>2} coords  {}",
                    g.name,
                    g.max_rel_err,
                    g.max_zero_abs,
                    g.checked,
                    if g.pass { "ok" } else { "FAIL" }
                );
            }
            if report.pass {
                println!("gradient check passed at tol {tol:e}");
                Ok(())
            } else {
                Err(LabError::Training(format!("gradient check failed at tol {tol:e}")))
            }
        }
        Command::Ablate { spec, out } => {
            let spec = AblationSpec::load(&spec)?;
            let outcome = run_ablation(&spec, &out)?;
            for v in &outcome.verdicts {
                println!("{}: {} ({})", v.name, if v.pass { "pass" } else { "fail" }, v.detail);
            }
            println!("wrote {}", out.join("results.csv").display());
            Ok(())
        }
    }
}
