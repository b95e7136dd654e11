//! Differentiable temporal warp: backward bilinear sampling under a
//! displacement field, periodic in x and clamped in y.
//!
//! `out[i, j] = sample(input, y = i - dy[i,j], x = j - dx[i,j])`, i.e. the
//! flow says where each output pixel's content came from one step earlier.
//! Interpolation uses the lerp form `a + t*(b - a)` so integer displacements
//! reproduce grid values exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::real::Real;

/// How many displacement pairs a flow tensor carries for `c` data channels.
fn flow_pairs(flow_len: usize, b: usize, c: usize, h: usize, w: usize) -> Result<usize, CoreError> {
    let plane = b * h * w;
    if plane == 0 || flow_len % plane != 0 {
        return Err(CoreError::ShapeMismatch(format!(
            "flow length {flow_len} does not tile {b}x?x{h}x{w}"
        )));
    }
    let fc = flow_len / plane;
    if fc == 2 {
        Ok(1)
    } else if fc == 2 * c {
        Ok(c)
    } else {
        Err(CoreError::ShapeMismatch(format!(
            "flow must have 2 or {} channels, got {fc}",
            2 * c
        )))
    }
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// Sampling geometry for one output pixel: corner indices and fractions.
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    tx: f64,
    ty: f64,
    /// False when the y coordinate hit the clamp, killing the dy gradient.
    dy_active: bool,
}

fn tap(i: usize, j: usize, dx: f64, dy: f64, h: usize, w: usize) -> Tap {
    let src_x = j as f64 - dx;
    let src_y = i as f64 - dy;
    let fx = libm::floor(src_x);
    let tx = src_x - fx;
    // Saturating float->int conversion keeps absurd flows defined.
    let x0 = wrap(fx as isize, w);
    let x1 = wrap(fx as isize + 1, w);
    let yc = src_y.clamp(0.0, (h - 1) as f64);
    let fy = libm::floor(yc);
    let ty = yc - fy;
    let y0 = fy as usize;
    let y1 = (y0 + 1).min(h - 1);
    let dy_active = src_y > 0.0 && src_y < (h - 1) as f64;
    Tap { x0, x1, y0, y1, tx, ty, dy_active }
}

#[inline]
fn lerp<F: Real>(a: F, b: F, t: F) -> F {
    a + t * (b - a)
}

/// Warp `input` (B, C, H, W) by `flow` (B, 2, H, W) or (B, 2C, H, W).
/// Flow channel 2k is the x-displacement, 2k+1 the y-displacement.
pub fn temporal_warp<F: Real>(
    input: &[F],
    flow: &[F],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Vec<F>, CoreError> {
    if input.len() != b * c * h * w {
        return Err(CoreError::ShapeMismatch(format!(
            "input length {} != {b}x{c}x{h}x{w}",
            input.len()
        )));
    }
    let pairs = flow_pairs(flow.len(), b, c, h, w)?;
    let fc = 2 * pairs;
    // Exactly-zero flow is the common init-time case; copy through untouched.
    if flow.iter().all(|v| *v == F::zero()) {
        return Ok(input.to_vec());
    }
    let plane = h * w;
    let mut out = vec![F::zero(); input.len()];
    for bi in 0..b {
        for ci in 0..c {
            let pair = if pairs == 1 { 0 } else { ci };
            let fx_plane = &flow[(bi * fc + 2 * pair) * plane..][..plane];
            let fy_plane = &flow[(bi * fc + 2 * pair + 1) * plane..][..plane];
            let src = &input[(bi * c + ci) * plane..][..plane];
            let dst = &mut out[(bi * c + ci) * plane..][..plane];
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let t = tap(i, j, fx_plane[p].as_f64(), fy_plane[p].as_f64(), h, w);
                    let (tx, ty) = (F::of(t.tx), F::of(t.ty));
                    let top = lerp(src[t.y0 * w + t.x0], src[t.y0 * w + t.x1], tx);
                    let bot = lerp(src[t.y1 * w + t.x0], src[t.y1 * w + t.x1], tx);
                    dst[p] = lerp(top, bot, ty);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of the warp with respect to both input field and flow.
pub fn temporal_warp_backward<F: Real>(
    input: &[F],
    flow: &[F],
    grad_out: &[F],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<(Vec<F>, Vec<F>), CoreError> {
    if input.len() != b * c * h * w || grad_out.len() != input.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "backward lengths input {} grad {} != {b}x{c}x{h}x{w}",
            input.len(),
            grad_out.len()
        )));
    }
    let pairs = flow_pairs(flow.len(), b, c, h, w)?;
    let fc = 2 * pairs;
    let plane = h * w;
    let mut g_input = vec![F::zero(); input.len()];
    let mut g_flow = vec![F::zero(); flow.len()];
    for bi in 0..b {
        for ci in 0..c {
            let pair = if pairs == 1 { 0 } else { ci };
            let fx_plane = &flow[(bi * fc + 2 * pair) * plane..][..plane];
            let fy_plane = &flow[(bi * fc + 2 * pair + 1) * plane..][..plane];
            let src = &input[(bi * c + ci) * plane..][..plane];
            let gout = &grad_out[(bi * c + ci) * plane..][..plane];
            for i in 0..h {
                for j in 0..w {
                    let p = i * w + j;
                    let g = gout[p];
                    if g == F::zero() {
                        continue;
                    }
                    let t = tap(i, j, fx_plane[p].as_f64(), fy_plane[p].as_f64(), h, w);
                    let (tx, ty) = (t.tx, t.ty);
                    let gf = g.as_f64();
                    let i00 = t.y0 * w + t.x0;
                    let i01 = t.y0 * w + t.x1;
                    let i10 = t.y1 * w + t.x0;
                    let i11 = t.y1 * w + t.x1;
                    let gi = &mut g_input[(bi * c + ci) * plane..][..plane];
                    gi[i00] = gi[i00] + F::of(gf * (1.0 - tx) * (1.0 - ty));
                    gi[i01] = gi[i01] + F::of(gf * tx * (1.0 - ty));
                    gi[i10] = gi[i10] + F::of(gf * (1.0 - tx) * ty);
                    gi[i11] = gi[i11] + F::of(gf * tx * ty);
                    // d out / d tx, with d tx / d dx = -1.
                    let f00 = src[i00].as_f64();
                    let f01 = src[i01].as_f64();
                    let f10 = src[i10].as_f64();
                    let f11 = src[i11].as_f64();
                    let dtx = (1.0 - ty) * (f01 - f00) + ty * (f11 - f10);
                    let gfx = &mut g_flow[(bi * fc + 2 * pair) * plane..][..plane];
                    gfx[p] = gfx[p] + F::of(-gf * dtx);
                    if t.dy_active {
                        let dty = (1.0 - tx) * (f10 - f00) + tx * (f11 - f01);
                        let gfy = &mut g_flow[(bi * fc + 2 * pair + 1) * plane..][..plane];
                        gfy[p] = gfy[p] + F::of(-gf * dty);
                    }
                }
            }
        }
    }
    Ok((g_input, g_flow))
}

/// Model output composition: `value + warp(input, flow)`.
pub fn compose_prediction<F: Real>(
    value: &[F],
    input: &[F],
    flow: &[F],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Result<Vec<F>, CoreError> {
    if value.len() != input.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "value length {} != input length {}",
            value.len(),
            input.len()
        )));
    }
    let mut out = temporal_warp(input, flow, b, c, h, w)?;
    for (o, v) in out.iter_mut().zip(value) {
        *o = *o + *v;
    }
    Ok(out)
}
