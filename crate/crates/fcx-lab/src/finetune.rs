//! Multi-step curriculum fine-tuning with a frozen teacher.
//!
//! The curriculum raises `curr_step` from 1 to its maximum, spending a fixed
//! step budget per increment. Within an increment the teacher is an immutable
//! snapshot; at the end of each increment it is replaced by a snapshot of the
//! student. The optimizer state and the cosine schedule span the whole stage,
//! and the example stream uses a fixed horizon, so the data stream is
//! identical no matter how the increments are cut.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fcx_core::optim::{lamb_step, CosineSchedule, LambConfig, LambState};
use fcx_core::rng::RngStream;
use fcx_core::rollout::{finetune_step, STREAM_TEACHER};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{CurriculumConfig, RunConfig};
use crate::error::{LabError, Result};
use crate::pool::ExampleSource;
use crate::trainer::build_source;

/// One row of the fine-tuning metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRow {
    pub step: u64,
    pub increment: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub multi_loss: f64,
    pub single_loss: f64,
    pub seconds: f64,
}

pub fn finetune_metrics_to_csv(rows: &[FinetuneRow]) -> String {
    let mut out = String::from("step,increment,lr,batch_size,multi_loss,single_loss,seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.step, r.increment, r.lr, r.batch_size, r.multi_loss, r.single_loss, r.seconds
        ));
    }
    out
}

/// End-of-increment record: the re-frozen teacher is the student checkpoint.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IncrementRecord {
    pub increment: usize,
    pub checkpoint: String,
    pub teacher_digest: String,
}

/// What a finished curriculum hands back.
#[derive(Debug)]
pub struct CurriculumOutcome {
    pub checkpoint_dir: PathBuf,
    pub digest: String,
    pub rows: Vec<FinetuneRow>,
    pub increments: Vec<IncrementRecord>,
}

/// Run the full curriculum from a pretrained checkpoint.
pub fn curriculum_finetune(
    run_cfg: &RunConfig,
    cur: &CurriculumConfig,
    pretrained_dir: &Path,
    out_dir: &Path,
) -> Result<CurriculumOutcome> {
    run_cfg.validate()?;
    cur.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| LabError::io(out_dir, e))?;

    let mut student = load_checkpoint(pretrained_dir)?;
    if student.arch != run_cfg.arch {
        return Err(LabError::Config(
            "pretrained checkpoint architecture disagrees with the run config".into(),
        ));
    }
    let mut teacher = student.clone();

    // The stream seed comes from the curriculum so fine-tuning draws fresh
    // examples even when the run config seed matches pretraining.
    let stream_cfg = RunConfig { seed: cur.seed, ..run_cfg.clone() };
    let (mut src, _ds) = build_source(&stream_cfg, cur.max_time_steps)?;
    let (c, (h, w)) = (run_cfg.arch.channels, run_cfg.crop_dims());

    let total_steps = cur.steps_per_increment * cur.max_time_steps as u64;
    let sched = CosineSchedule::new(cur.lr_init, cur.lr_final, total_steps)?;
    let lamb_cfg = LambConfig { weight_decay: run_cfg.weight_decay, ..LambConfig::default() };
    let mut opt = LambState::new(&student, lamb_cfg)?;
    let mut rng = RngStream::new(cur.seed, STREAM_TEACHER);

    let start = Instant::now();
    let mut rows = Vec::new();
    let mut increments = Vec::new();
    let mut global = 0u64;

    for inc in 1..=cur.max_time_steps {
        for _ in 0..cur.steps_per_increment {
            let lr = sched.lr_at(global);
            let mut grads = student.zeros_like();
            let scale = 1.0 / cur.batch_size as f64;
            let mut multi_sum = 0.0;
            let mut single_sum = 0.0;
            for _ in 0..cur.batch_size {
                let ex = src.next_example()?;
                let outcome = finetune_step(
                    &student, &teacher, &ex.input, &ex.targets, inc, c, h, w, &mut rng, scale,
                    &mut grads,
                )?;
                multi_sum += outcome.multi_loss;
                single_sum += outcome.single_loss;
            }
            let multi = multi_sum * scale;
            let single = single_sum * scale;
            if !(multi + single).is_finite() {
                std::fs::write(out_dir.join("metrics.csv"), finetune_metrics_to_csv(&rows))
                    .map_err(|e| LabError::io(out_dir, e))?;
                return Err(LabError::Training(format!(
                    "non-finite loss at fine-tune step {} (increment {})",
                    global + 1,
                    inc
                )));
            }
            lamb_step(&mut student, &grads, &mut opt, lr)?;
            global += 1;
            rows.push(FinetuneRow {
                step: global,
                increment: inc,
                lr,
                batch_size: cur.batch_size,
                multi_loss: multi,
                single_loss: single,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        // Snapshot: the teacher for the next increment is this student.
        teacher = student.clone();
        let ckpt = out_dir.join(format!("ckpt_inc{}", inc));
        save_checkpoint(&student, &ckpt)?;
        increments.push(IncrementRecord {
            increment: inc,
            checkpoint: ckpt.display().to_string(),
            teacher_digest: crate::checkpoint::params_digest(&teacher),
        });
    }

    let final_dir = out_dir.join("ckpt_final");
    let digest = save_checkpoint(&student, &final_dir)?;
    std::fs::write(out_dir.join("metrics.csv"), finetune_metrics_to_csv(&rows))
        .map_err(|e| LabError::io(out_dir, e))?;
    let inc_json = serde_json::to_value(&increments)
        .map_err(|e| LabError::Format(format!("increment encode: {}", e)))?;
    std::fs::write(
        out_dir.join("increments.json"),
        crate::dataset::json_with_full_floats(&inc_json),
    )
    .map_err(|e| LabError::io(out_dir, e))?;
    Ok(CurriculumOutcome { checkpoint_dir: final_dir, digest, rows, increments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::params_digest;
    use crate::dataset::{generate, DatasetMeta};
    use crate::trainer::{ensure_stats, pretrain};
    use fcx_core::ArchConfig;
    use tempfile::TempDir;

    fn tiny_setup() -> (TempDir, RunConfig, TempDir) {
        let data = TempDir::new().unwrap();
        let mut meta = DatasetMeta::desk_default(21);
        meta.grid_h = 8;
        meta.grid_w = 16;
        meta.n_timesteps = 48;
        let ds = generate(&meta, data.path()).unwrap();
        ensure_stats(&ds).unwrap();
        let cfg = RunConfig {
            data_dir: Some(data.path().to_path_buf()),
            arch: ArchConfig {
                grid_h: 8,
                grid_w: 16,
                embed_dim: 16,
                blocks: 1,
                spectral_blocks: 2,
                ..ArchConfig::desk_default()
            },
            max_steps: 6,
            batch_schedule: vec![(0, 2)],
            log_every: 2,
            checkpoint_every: 100,
            seed: 9,
            ..RunConfig::default()
        };
        let pre_out = TempDir::new().unwrap();
        pretrain(&cfg, pre_out.path()).unwrap();
        (data, cfg, pre_out)
    }

    fn tiny_curriculum() -> CurriculumConfig {
        CurriculumConfig {
            max_time_steps: 2,
            steps_per_increment: 3,
            batch_size: 2,
            seed: 31,
            ..CurriculumConfig::default()
        }
    }

    #[test]
    fn teacher_snapshots_equal_increment_checkpoints() {
        let (_data, cfg, pre) = tiny_setup();
        let out = TempDir::new().unwrap();
        let outcome = curriculum_finetune(
            &cfg,
            &tiny_curriculum(),
            &pre.path().join("ckpt_final"),
            out.path(),
        )
        .unwrap();

        assert_eq!(outcome.increments.len(), 2);
        for rec in &outcome.increments {
            let ckpt = load_checkpoint(Path::new(&rec.checkpoint)).unwrap();
            assert_eq!(params_digest(&ckpt), rec.teacher_digest);
        }
        // The last increment snapshot is the final checkpoint.
        let final_params = load_checkpoint(&outcome.checkpoint_dir).unwrap();
        assert_eq!(outcome.increments[1].teacher_digest, params_digest(&final_params));
        // Fine-tuning actually changed the weights.
        let pretrained = load_checkpoint(&pre.path().join("ckpt_final")).unwrap();
        assert_ne!(params_digest(&pretrained), params_digest(&final_params));
        assert!(out.path().join("metrics.csv").exists());
        assert!(out.path().join("increments.json").exists());
    }

    #[test]
    fn first_increment_losses_coincide() {
        // curr_step = 1 forces teacher_step = 1, where the multi-step input
        // is the observation itself: both loss terms are the same number.
        let (_data, cfg, pre) = tiny_setup();
        let out = TempDir::new().unwrap();
        let outcome = curriculum_finetune(
            &cfg,
            &tiny_curriculum(),
            &pre.path().join("ckpt_final"),
            out.path(),
        )
        .unwrap();
        for row in outcome.rows.iter().filter(|r| r.increment == 1) {
            assert_eq!(row.multi_loss, row.single_loss, "step {}", row.step);
        }
        // Deeper increments roll the teacher out, so the terms part ways.
        assert!(outcome
            .rows
            .iter()
            .filter(|r| r.increment == 2)
            .any(|r| r.multi_loss != r.single_loss));
    }

    #[test]
    fn curriculum_is_deterministic() {
        let (_data, cfg, pre) = tiny_setup();
        let out_a = TempDir::new().unwrap();
        let out_b = TempDir::new().unwrap();
        let cur = tiny_curriculum();
        let a = curriculum_finetune(&cfg, &cur, &pre.path().join("ckpt_final"), out_a.path())
            .unwrap();
        let b = curriculum_finetune(&cfg, &cur, &pre.path().join("ckpt_final"), out_b.path())
            .unwrap();
        assert_eq!(a.digest, b.digest);
        let strip = |rows: &[FinetuneRow]| -> Vec<(u64, f64, f64)> {
            rows.iter().map(|r| (r.step, r.multi_loss, r.single_loss)).collect()
        };
        assert_eq!(strip(&a.rows), strip(&b.rows));

        // A different curriculum seed changes the stream and the result.
        let other = CurriculumConfig { seed: 77, ..cur };
        let out_c = TempDir::new().unwrap();
        let c = curriculum_finetune(&cfg, &other, &pre.path().join("ckpt_final"), out_c.path())
            .unwrap();
        assert_ne!(a.digest, c.digest);
    }

    #[test]
    fn arch_mismatch_is_rejected() {
        let (_data, cfg, pre) = tiny_setup();
        let out = TempDir::new().unwrap();
        let mut wrong = cfg.clone();
        wrong.arch.embed_dim = 32;
        let err = curriculum_finetune(
            &wrong,
            &tiny_curriculum(),
            &pre.path().join("ckpt_final"),
            out.path(),
        )
        .unwrap_err();
        assert!(format!("{}", err).contains("architecture"));
    }
}
