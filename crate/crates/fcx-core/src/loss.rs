//! Training objective: mean squared error between the composed prediction and
//! the target frame, with gradients routed through both heads.

use alloc::vec::Vec;

use crate::error::CoreError;
use crate::field::FieldBatch;
use crate::model::{backward, forward, forward_cached};
use crate::params::ModelParams;
use crate::real::Real;
use crate::warp::{temporal_warp, temporal_warp_backward};

/// One-step prediction for a single `(C, h, w)` example:
/// `value + warp(input, flow)`, or `value + input` when flow is disabled.
pub fn predict<F: Real>(
    params: &ModelParams<F>,
    input: &[F],
    c: usize,
    h: usize,
    w: usize,
) -> Result<Vec<F>, CoreError> {
    let out = forward(params, input, c, h, w)?;
    compose(out.value, out.flow.as_deref(), input, c, h, w)
}

fn compose<F: Real>(
    value: Vec<F>,
    flow: Option<&[F]>,
    input: &[F],
    c: usize,
    h: usize,
    w: usize,
) -> Result<Vec<F>, CoreError> {
    let mut pred = match flow {
        Some(fl) => temporal_warp(input, fl, 1, c, h, w)?,
        None => input.to_vec(),
    };
    for (p, v) in pred.iter_mut().zip(&value) {
        *p = *p + *v;
    }
    Ok(pred)
}

fn mse<F: Real>(pred: &[F], target: &[F]) -> f64 {
    let mut acc = 0.0f64;
    for (p, t) in pred.iter().zip(target) {
        let r = p.as_f64() - t.as_f64();
        acc += r * r;
    }
    acc / pred.len() as f64
}

/// Loss of one example without gradients.
pub fn training_loss<F: Real>(
    params: &ModelParams<F>,
    input: &[F],
    target: &[F],
    c: usize,
    h: usize,
    w: usize,
) -> Result<f64, CoreError> {
    if target.len() != input.len() {
        return Err(CoreError::ShapeMismatch("target/input length".into()));
    }
    let pred = predict(params, input, c, h, w)?;
    Ok(mse(&pred, target))
}

/// Loss of one example plus parameter gradients, accumulated into `grads`
/// after scaling by `grad_scale` (callers use `1/B` for batch averaging).
pub fn training_loss_grads<F: Real>(
    params: &ModelParams<F>,
    input: &[F],
    target: &[F],
    c: usize,
    h: usize,
    w: usize,
    grad_scale: f64,
    grads: &mut ModelParams<F>,
) -> Result<f64, CoreError> {
    if target.len() != input.len() {
        return Err(CoreError::ShapeMismatch("target/input length".into()));
    }
    let (out, cache) = forward_cached(params, input, c, h, w)?;
    let pred = compose(out.value, out.flow.as_deref(), input, c, h, w)?;
    let loss = mse(&pred, &target[..]);
    let n = pred.len() as f64;
    let scale = F::of(2.0 * grad_scale / n);
    let g_pred: Vec<F> = pred
        .iter()
        .zip(target)
        .map(|(p, t)| scale * (*p - *t))
        .collect();
    // d pred / d value = identity; d pred / d flow via the warp.
    let g_flow = match out.flow.as_deref() {
        Some(fl) => {
            let (_, gf) = temporal_warp_backward(input, fl, &g_pred, 1, c, h, w)?;
            Some(gf)
        }
        None => None,
    };
    backward(params, input, c, h, w, &cache, &g_pred, g_flow.as_deref(), grads)?;
    Ok(loss)
}

/// Mean loss over a batch with gradients averaged into `grads`.
pub fn batch_loss_grads<F: Real>(
    params: &ModelParams<F>,
    inputs: &FieldBatch<F>,
    targets: &FieldBatch<F>,
    grads: &mut ModelParams<F>,
) -> Result<f64, CoreError> {
    if inputs.batch != targets.batch
        || inputs.example_len() != targets.example_len()
    {
        return Err(CoreError::ShapeMismatch("input/target batches disagree".into()));
    }
    let b = inputs.batch;
    let mut total = 0.0;
    for i in 0..b {
        total += training_loss_grads(
            params,
            inputs.example(i),
            targets.example(i),
            inputs.channels,
            inputs.height,
            inputs.width,
            1.0 / b as f64,
            grads,
        )?;
    }
    Ok(total / b as f64)
}

/// Mean loss over a batch, no gradients.
pub fn batch_loss<F: Real>(
    params: &ModelParams<F>,
    inputs: &FieldBatch<F>,
    targets: &FieldBatch<F>,
) -> Result<f64, CoreError> {
    let b = inputs.batch;
    let mut total = 0.0;
    for i in 0..b {
        total += training_loss(
            params,
            inputs.example(i),
            targets.example(i),
            inputs.channels,
            inputs.height,
            inputs.width,
        )?;
    }
    Ok(total / b as f64)
}
