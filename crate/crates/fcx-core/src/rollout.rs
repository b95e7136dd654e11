//! Autoregressive rollout and the curriculum fine-tuning step.
//!
//! Fine-tuning trains the student on two terms sharing one target frame: a
//! multi-step term whose input is a frozen teacher rolled out part of the way,
//! and a plain single-step term on the true previous frame. Only the student
//! receives gradients; the teacher is an immutable snapshot.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::loss::{predict, training_loss_grads};
use crate::params::ModelParams;
use crate::real::Real;
use crate::rng::RngStream;

/// RNG stream id reserved for drawing the teacher rollout depth.
pub const STREAM_TEACHER: u64 = 3;

/// Run the model autoregressively for `k` steps from `x0` (standardized
/// `(C, h, w)`). Returns the predicted states `1..=k`; `k = 0` yields an empty
/// list and the caller keeps using `x0`.
pub fn rollout<F: Real>(
    params: &ModelParams<F>,
    x0: &[F],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Result<Vec<Vec<F>>, CoreError> {
    let mut states = Vec::with_capacity(k);
    let mut current = x0.to_vec();
    for step in 1..=k {
        let next = predict(params, &current, c, h, w)?;
        if next.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(CoreError::NonFinite(alloc::format!(
                "rollout produced a non-finite state at step {}",
                step
            )));
        }
        states.push(next.clone());
        current = next;
    }
    Ok(states)
}

/// Uniform draw of the teacher rollout depth from `{1, ..., curr_step}`.
pub fn draw_teacher_step(rng: &mut RngStream, curr_step: usize) -> usize {
    1 + rng.below(curr_step as u64) as usize
}

/// The two loss terms given a prepared teacher output. `obs_prev` and
/// `obs_target` are the true frames bracketing the predicted transition.
/// Gradients of `multi + single` are accumulated into `grads` after scaling
/// by `grad_scale`. Returns `(multi_loss, single_loss)` unscaled.
#[allow(clippy::too_many_arguments)]
pub fn finetune_losses<F: Real>(
    student: &ModelParams<F>,
    teacher_output: &[F],
    obs_prev: &[F],
    obs_target: &[F],
    c: usize,
    h: usize,
    w: usize,
    grad_scale: f64,
    grads: &mut ModelParams<F>,
) -> Result<(f64, f64), CoreError> {
    let multi =
        training_loss_grads(student, teacher_output, obs_target, c, h, w, grad_scale, grads)?;
    let single = training_loss_grads(student, obs_prev, obs_target, c, h, w, grad_scale, grads)?;
    Ok((multi, single))
}

/// Result of one fine-tuning step on one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneOutcome {
    pub multi_loss: f64,
    pub single_loss: f64,
    pub teacher_step: usize,
}

/// One curriculum step: draw `teacher_step`, roll the frozen teacher
/// `teacher_step − 1` steps from the example's first frame, and accumulate
/// student gradients for both loss terms. `targets[k]` must be the true frame
/// `k + 1` steps after `input` at the same crop.
#[allow(clippy::too_many_arguments)]
pub fn finetune_step<F: Real>(
    student: &ModelParams<F>,
    teacher: &ModelParams<F>,
    input: &[F],
    targets: &[Vec<F>],
    curr_step: usize,
    c: usize,
    h: usize,
    w: usize,
    rng: &mut RngStream,
    grad_scale: f64,
    grads: &mut ModelParams<F>,
) -> Result<FinetuneOutcome, CoreError> {
    if curr_step < 1 {
        return Err(CoreError::InvalidConfig("curriculum step must be at least 1".to_string()));
    }
    if targets.len() < curr_step {
        return Err(CoreError::InvalidConfig(alloc::format!(
            "curriculum step {} exceeds example horizon {}",
            curr_step,
            targets.len()
        )));
    }
    let teacher_step = draw_teacher_step(rng, curr_step);
    let teacher_output = if teacher_step == 1 {
        input.to_vec()
    } else {
        rollout(teacher, input, c, h, w, teacher_step - 1)?
            .pop()
            .expect("rollout of at least one step returns states")
    };
    let obs_prev = if teacher_step == 1 { input } else { &targets[teacher_step - 2] };
    let obs_target = &targets[teacher_step - 1];
    let (multi_loss, single_loss) = finetune_losses(
        student,
        &teacher_output,
        obs_prev,
        obs_target,
        c,
        h,
        w,
        grad_scale,
        grads,
    )?;
    Ok(FinetuneOutcome { multi_loss, single_loss, teacher_step })
}
