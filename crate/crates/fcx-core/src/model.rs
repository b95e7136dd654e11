//! Forward and backward passes of the spectral transformer.
//!
//! A single example `(C, h, w)` is patch-embedded into a token grid, run
//! through N residual blocks (spectral filter + token MLP, each wrapped in the
//! configured norm wiring), and decoded by two linear heads into a value field
//! and a displacement field. Backward is written layer-by-layer against the
//! caches captured in the forward pass; no tape.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::arch::{ArchConfig, NormMode};
use crate::error::CoreError;
use crate::fft::fft2;
use crate::params::{HeadParams, LayerNormParams, ModelParams, SpectralParams};
use crate::real::Real;

const LN_EPS: f64 = 1e-6;

/// Tanh-approximation GELU, applied elementwise.
#[inline]
pub fn gelu<F: Real>(u: F) -> F {
    let k = F::of(0.7978845608028654); // sqrt(2/pi)
    let c = F::of(0.044715);
    let half = F::of(0.5);
    half * u * (F::one() + (k * (u + c * u * u * u)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
fn dgelu<F: Real>(u: F) -> F {
    let k = F::of(0.7978845608028654);
    let c = F::of(0.044715);
    let half = F::of(0.5);
    let t = (k * (u + c * u * u * u)).tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * u * sech2 * k * (F::one() + F::of(3.0) * c * u * u)
}

#[inline]
fn softshrink<F: Real>(v: F, lambda: F) -> F {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        F::zero()
    }
}

struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

struct SpectralCache<F> {
    z_re: Vec<F>,
    z_im: Vec<F>,
    u1_re: Vec<F>,
    u1_im: Vec<F>,
    h1_re: Vec<F>,
    h1_im: Vec<F>,
    y2_re: Vec<F>,
    y2_im: Vec<F>,
}

struct MlpCache<F> {
    input: Vec<F>,
    u: Vec<F>,
    h: Vec<F>,
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    spectral: SpectralCache<F>,
    ln2: LnCache<F>,
    mlp: MlpCache<F>,
}

/// Everything backward needs from a forward pass.
pub struct ForwardCache<F> {
    th: usize,
    tw: usize,
    blocks: Vec<BlockCache<F>>,
    final_ln: Option<LnCache<F>>,
    trunk: Vec<F>,
}

/// Decoded model output for one example.
pub struct ModelOut<F> {
    /// `(C, h, w)` value field.
    pub value: Vec<F>,
    /// `(flow_channels, h, w)` displacement field; `None` when flow is disabled.
    pub flow: Option<Vec<F>>,
}

fn validate_input<F: Real>(
    params: &ModelParams<F>,
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
) -> Result<(usize, usize), CoreError> {
    let arch = &params.arch;
    if c != arch.channels {
        return Err(CoreError::ShapeMismatch(format!(
            "input has {c} channels, model wants {}",
            arch.channels
        )));
    }
    if x.len() != c * h * w {
        return Err(CoreError::ShapeMismatch(format!(
            "input length {} != {c}x{h}x{w}",
            x.len()
        )));
    }
    arch.token_dims(h, w)
}

/// Per-axis low-pass mask over token frequencies.
fn mode_kept(k: usize, n: usize, kept: f64) -> bool {
    let folded = k.min(n - k.min(n)) as f64; // min(k, n-k)
    folded <= kept * (n as f64 / 2.0) + 1e-9
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

fn layer_norm_fwd<F: Real>(
    x: &[F],
    p: &LayerNormParams<F>,
    tokens: usize,
    d: usize,
) -> (Vec<F>, LnCache<F>) {
    let gain = p.gain.data();
    let bias = p.bias.data();
    let mut out = vec![F::zero(); tokens * d];
    let mut xhat = vec![F::zero(); tokens * d];
    let mut rstd = vec![F::zero(); tokens];
    let inv_d = F::of(1.0 / d as f64);
    for t in 0..tokens {
        let row = &x[t * d..(t + 1) * d];
        let mut mean = F::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean * inv_d;
        let mut var = F::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var * inv_d;
        let r = (var + F::of(LN_EPS)).sqrt().recip();
        rstd[t] = r;
        let xh = &mut xhat[t * d..(t + 1) * d];
        let o = &mut out[t * d..(t + 1) * d];
        for i in 0..d {
            let h = (row[i] - mean) * r;
            xh[i] = h;
            o[i] = gain[i] * h + bias[i];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns grad wrt the LN input; accumulates gain/bias grads.
fn layer_norm_bwd<F: Real>(
    g_out: &[F],
    cache: &LnCache<F>,
    p: &LayerNormParams<F>,
    g_p: &mut LayerNormParams<F>,
    tokens: usize,
    d: usize,
) -> Vec<F> {
    let gain = p.gain.data();
    let g_gain = g_p.gain.data_mut();
    let g_bias = g_p.bias.data_mut();
    let mut g_x = vec![F::zero(); tokens * d];
    let inv_d = F::of(1.0 / d as f64);
    for t in 0..tokens {
        let go = &g_out[t * d..(t + 1) * d];
        let xh = &cache.xhat[t * d..(t + 1) * d];
        let r = cache.rstd[t];
        let mut sum_gh = F::zero();
        let mut sum_ghx = F::zero();
        for i in 0..d {
            g_gain[i] = g_gain[i] + go[i] * xh[i];
            g_bias[i] = g_bias[i] + go[i];
            let gh = go[i] * gain[i];
            sum_gh = sum_gh + gh;
            sum_ghx = sum_ghx + gh * xh[i];
        }
        let mean_gh = sum_gh * inv_d;
        let mean_ghx = sum_ghx * inv_d;
        let gx = &mut g_x[t * d..(t + 1) * d];
        for i in 0..d {
            let gh = go[i] * gain[i];
            gx[i] = r * (gh - mean_gh - xh[i] * mean_ghx);
        }
    }
    g_x
}

// ---------------------------------------------------------------------------
// Spectral filter sublayer
// ---------------------------------------------------------------------------

fn spectral_fwd<F: Real>(
    t_in: &[F],
    p: &SpectralParams<F>,
    arch: &ArchConfig,
    th: usize,
    tw: usize,
) -> (Vec<F>, SpectralCache<F>) {
    let d = arch.embed_dim;
    let nb = arch.spectral_blocks;
    let bs = d / nb;
    let n = th * tw * d;
    let lambda = F::of(arch.softshrink);

    let mut z_re = t_in.to_vec();
    let mut z_im = vec![F::zero(); n];
    fft2(&mut z_re, &mut z_im, th, tw, d, false);

    let mut u1_re = vec![F::zero(); n];
    let mut u1_im = vec![F::zero(); n];
    let mut h1_re = vec![F::zero(); n];
    let mut h1_im = vec![F::zero(); n];
    let mut y2_re = vec![F::zero(); n];
    let mut y2_im = vec![F::zero(); n];
    let mut out_re = vec![F::zero(); n];
    let mut out_im = vec![F::zero(); n];

    let w1_re = p.l1.w_re.data();
    let w1_im = p.l1.w_im.data();
    let b1_re = p.l1.b_re.data();
    let b1_im = p.l1.b_im.data();
    let w2_re = p.l2.w_re.data();
    let w2_im = p.l2.w_im.data();
    let b2_re = p.l2.b_re.data();
    let b2_im = p.l2.b_im.data();

    for kh in 0..th {
        let keep_h = mode_kept(kh, th, arch.kept_modes);
        for kw in 0..tw {
            if !(keep_h && mode_kept(kw, tw, arch.kept_modes)) {
                continue; // masked: output and caches stay zero
            }
            let base = (kh * tw + kw) * d;
            for k in 0..nb {
                let zb_re = &z_re[base + k * bs..base + (k + 1) * bs];
                let zb_im = &z_im[base + k * bs..base + (k + 1) * bs];
                // Layer 1: complex matvec + bias, then GELU on re/im parts.
                for o in 0..bs {
                    let wr = &w1_re[(k * bs + o) * bs..(k * bs + o + 1) * bs];
                    let wi = &w1_im[(k * bs + o) * bs..(k * bs + o + 1) * bs];
                    let mut ar = b1_re[k * bs + o];
                    let mut ai = b1_im[k * bs + o];
                    for i in 0..bs {
                        ar = ar + wr[i] * zb_re[i] - wi[i] * zb_im[i];
                        ai = ai + wr[i] * zb_im[i] + wi[i] * zb_re[i];
                    }
                    let idx = base + k * bs + o;
                    u1_re[idx] = ar;
                    u1_im[idx] = ai;
                    h1_re[idx] = gelu(ar);
                    h1_im[idx] = gelu(ai);
                }
                // Layer 2 + soft-shrinkage.
                for o in 0..bs {
                    let wr = &w2_re[(k * bs + o) * bs..(k * bs + o + 1) * bs];
                    let wi = &w2_im[(k * bs + o) * bs..(k * bs + o + 1) * bs];
                    let mut ar = b2_re[k * bs + o];
                    let mut ai = b2_im[k * bs + o];
                    for i in 0..bs {
                        let hr = h1_re[base + k * bs + i];
                        let hi = h1_im[base + k * bs + i];
                        ar = ar + wr[i] * hr - wi[i] * hi;
                        ai = ai + wr[i] * hi + wi[i] * hr;
                    }
                    let idx = base + k * bs + o;
                    y2_re[idx] = ar;
                    y2_im[idx] = ai;
                    out_re[idx] = softshrink(ar, lambda);
                    out_im[idx] = softshrink(ai, lambda);
                }
            }
        }
    }

    fft2(&mut out_re, &mut out_im, th, tw, d, true);
    // Real part only; the imaginary remainder is discarded by construction.
    (out_re, SpectralCache { z_re, z_im, u1_re, u1_im, h1_re, h1_im, y2_re, y2_im })
}

/// Backward of the spectral sublayer. Returns grad wrt `t_in`.
fn spectral_bwd<F: Real>(
    g_out: &[F],
    cache: &SpectralCache<F>,
    p: &SpectralParams<F>,
    g_p: &mut SpectralParams<F>,
    arch: &ArchConfig,
    th: usize,
    tw: usize,
) -> Vec<F> {
    let d = arch.embed_dim;
    let nb = arch.spectral_blocks;
    let bs = d / nb;
    let n = th * tw * d;
    let lambda = F::of(arch.softshrink);

    // out = Re(ifft2(Y)); adjoint embeds the real grad and runs a forward fft.
    let mut gy_re = g_out.to_vec();
    let mut gy_im = vec![F::zero(); n];
    fft2(&mut gy_re, &mut gy_im, th, tw, d, false);

    let mut gz_re = vec![F::zero(); n];
    let mut gz_im = vec![F::zero(); n];

    let w1_re = p.l1.w_re.data();
    let w1_im = p.l1.w_im.data();
    let w2_re = p.l2.w_re.data();
    let w2_im = p.l2.w_im.data();
    let gw1_re = g_p.l1.w_re.data_mut();
    let gw1_im = g_p.l1.w_im.data_mut();
    let gb1_re = g_p.l1.b_re.data_mut();
    let gb1_im = g_p.l1.b_im.data_mut();
    let gw2_re = g_p.l2.w_re.data_mut();
    let gw2_im = g_p.l2.w_im.data_mut();
    let gb2_re = g_p.l2.b_re.data_mut();
    let gb2_im = g_p.l2.b_im.data_mut();

    let mut gh_re = vec![F::zero(); bs];
    let mut gh_im = vec![F::zero(); bs];
    for kh in 0..th {
        let keep_h = mode_kept(kh, th, arch.kept_modes);
        for kw in 0..tw {
            if !(keep_h && mode_kept(kw, tw, arch.kept_modes)) {
                continue; // masked modes carry no gradient
            }
            let base = (kh * tw + kw) * d;
            for k in 0..nb {
                // Shrink gate, then layer 2.
                gh_re.iter_mut().for_each(|v| *v = F::zero());
                gh_im.iter_mut().for_each(|v| *v = F::zero());
                for o in 0..bs {
                    let idx = base + k * bs + o;
                    let gr = if cache.y2_re[idx].abs() > lambda { gy_re[idx] } else { F::zero() };
                    let gi = if cache.y2_im[idx].abs() > lambda { gy_im[idx] } else { F::zero() };
                    if gr == F::zero() && gi == F::zero() {
                        continue;
                    }
                    gb2_re[k * bs + o] = gb2_re[k * bs + o] + gr;
                    gb2_im[k * bs + o] = gb2_im[k * bs + o] + gi;
                    let row = (k * bs + o) * bs;
                    for i in 0..bs {
                        let hr = cache.h1_re[base + k * bs + i];
                        let hi = cache.h1_im[base + k * bs + i];
                        gw2_re[row + i] = gw2_re[row + i] + gr * hr + gi * hi;
                        gw2_im[row + i] = gw2_im[row + i] - gr * hi + gi * hr;
                        gh_re[i] = gh_re[i] + w2_re[row + i] * gr + w2_im[row + i] * gi;
                        gh_im[i] = gh_im[i] - w2_im[row + i] * gr + w2_re[row + i] * gi;
                    }
                }
                // GELU gate, then layer 1.
                for o in 0..bs {
                    let idx = base + k * bs + o;
                    let gr = gh_re[o] * dgelu(cache.u1_re[idx]);
                    let gi = gh_im[o] * dgelu(cache.u1_im[idx]);
                    if gr == F::zero() && gi == F::zero() {
                        continue;
                    }
                    gb1_re[k * bs + o] = gb1_re[k * bs + o] + gr;
                    gb1_im[k * bs + o] = gb1_im[k * bs + o] + gi;
                    let row = (k * bs + o) * bs;
                    for i in 0..bs {
                        let zr = cache.z_re[base + k * bs + i];
                        let zi = cache.z_im[base + k * bs + i];
                        gw1_re[row + i] = gw1_re[row + i] + gr * zr + gi * zi;
                        gw1_im[row + i] = gw1_im[row + i] - gr * zi + gi * zr;
                        gz_re[base + k * bs + i] =
                            gz_re[base + k * bs + i] + w1_re[row + i] * gr + w1_im[row + i] * gi;
                        gz_im[base + k * bs + i] =
                            gz_im[base + k * bs + i] - w1_im[row + i] * gr + w1_re[row + i] * gi;
                    }
                }
            }
        }
    }

    // z = fft2(embed(t)); adjoint is the real part of the inverse transform.
    fft2(&mut gz_re, &mut gz_im, th, tw, d, true);
    gz_re
}

// ---------------------------------------------------------------------------
// Token MLP sublayer
// ---------------------------------------------------------------------------

fn mlp_fwd<F: Real>(
    t_in: &[F],
    p: &crate::params::MlpParams<F>,
    tokens: usize,
    d: usize,
) -> (Vec<F>, MlpCache<F>) {
    let hidden = p.b1.numel();
    let w1 = p.w1.data();
    let b1 = p.b1.data();
    let w2 = p.w2.data();
    let b2 = p.b2.data();
    let mut u = vec![F::zero(); tokens * hidden];
    let mut h = vec![F::zero(); tokens * hidden];
    let mut out = vec![F::zero(); tokens * d];
    for t in 0..tokens {
        let x = &t_in[t * d..(t + 1) * d];
        let ur = &mut u[t * hidden..(t + 1) * hidden];
        let hr = &mut h[t * hidden..(t + 1) * hidden];
        for o in 0..hidden {
            let wrow = &w1[o * d..(o + 1) * d];
            let mut acc = b1[o];
            for i in 0..d {
                acc = acc + wrow[i] * x[i];
            }
            ur[o] = acc;
            hr[o] = gelu(acc);
        }
        let orow = &mut out[t * d..(t + 1) * d];
        for o in 0..d {
            let wrow = &w2[o * hidden..(o + 1) * hidden];
            let mut acc = b2[o];
            for i in 0..hidden {
                acc = acc + wrow[i] * hr[i];
            }
            orow[o] = acc;
        }
    }
    (out, MlpCache { input: t_in.to_vec(), u, h })
}

fn mlp_bwd<F: Real>(
    g_out: &[F],
    cache: &MlpCache<F>,
    p: &crate::params::MlpParams<F>,
    g_p: &mut crate::params::MlpParams<F>,
    tokens: usize,
    d: usize,
) -> Vec<F> {
    let hidden = p.b1.numel();
    let w1 = p.w1.data();
    let w2 = p.w2.data();
    let gw1 = g_p.w1.data_mut();
    let gb1 = g_p.b1.data_mut();
    let gw2 = g_p.w2.data_mut();
    let gb2 = g_p.b2.data_mut();
    let mut g_x = vec![F::zero(); tokens * d];
    let mut gh = vec![F::zero(); hidden];
    for t in 0..tokens {
        let go = &g_out[t * d..(t + 1) * d];
        let hr = &cache.h[t * hidden..(t + 1) * hidden];
        let ur = &cache.u[t * hidden..(t + 1) * hidden];
        let x = &cache.input[t * d..(t + 1) * d];
        gh.iter_mut().for_each(|v| *v = F::zero());
        for o in 0..d {
            let g = go[o];
            if g == F::zero() {
                continue;
            }
            gb2[o] = gb2[o] + g;
            let wrow = &w2[o * hidden..(o + 1) * hidden];
            let gwrow = &mut gw2[o * hidden..(o + 1) * hidden];
            for i in 0..hidden {
                gwrow[i] = gwrow[i] + g * hr[i];
                gh[i] = gh[i] + wrow[i] * g;
            }
        }
        let gx = &mut g_x[t * d..(t + 1) * d];
        for o in 0..hidden {
            let gu = gh[o] * dgelu(ur[o]);
            if gu == F::zero() {
                continue;
            }
            gb1[o] = gb1[o] + gu;
            let wrow = &w1[o * d..(o + 1) * d];
            let gwrow = &mut gw1[o * d..(o + 1) * d];
            for i in 0..d {
                gwrow[i] = gwrow[i] + gu * x[i];
                gx[i] = gx[i] + wrow[i] * gu;
            }
        }
    }
    g_x
}

// ---------------------------------------------------------------------------
// Embedding and heads
// ---------------------------------------------------------------------------

/// Gather the patch pixel vector for token (ti, tj): channel-major
/// `(c, dy, dx)` order, matching the head output layout.
fn gather_patch<F: Real>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    p: usize,
    ti: usize,
    tj: usize,
    out: &mut [F],
) {
    let mut o = 0;
    for ci in 0..c {
        for dy in 0..p {
            let row = (ci * h + ti * p + dy) * w + tj * p;
            out[o..o + p].copy_from_slice(&x[row..row + p]);
            o += p;
        }
    }
}

fn embed_tokens<F: Real>(
    params: &ModelParams<F>,
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<F> {
    let arch = &params.arch;
    let d = arch.embed_dim;
    let p = arch.patch;
    let plen = arch.patch_len();
    let wt_full = arch.grid_w / p;
    let wp = params.patch_weight.data();
    let bp = params.patch_bias.data();
    let pos = params.pos_embed.data();
    let mut tokens = vec![F::zero(); th * tw * d];
    let mut patch = vec![F::zero(); plen];
    for ti in 0..th {
        for tj in 0..tw {
            gather_patch(x, c, h, w, p, ti, tj, &mut patch);
            let trow = &mut tokens[(ti * tw + tj) * d..(ti * tw + tj + 1) * d];
            // Positional embedding: top-left sub-block of the full grid.
            let prow = &pos[(ti * wt_full + tj) * d..(ti * wt_full + tj + 1) * d];
            for o in 0..d {
                let wrow = &wp[o * plen..(o + 1) * plen];
                let mut acc = bp[o];
                for i in 0..plen {
                    acc = acc + wrow[i] * patch[i];
                }
                trow[o] = acc + prow[o];
            }
        }
    }
    tokens
}

fn embed_bwd<F: Real>(
    g_tokens: &[F],
    params: &ModelParams<F>,
    grads: &mut ModelParams<F>,
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) {
    let arch = &params.arch;
    let d = arch.embed_dim;
    let p = arch.patch;
    let plen = arch.patch_len();
    let wt_full = arch.grid_w / p;
    let gw = grads.patch_weight.data_mut();
    let gb = grads.patch_bias.data_mut();
    let gpos = grads.pos_embed.data_mut();
    let mut patch = vec![F::zero(); plen];
    for ti in 0..th {
        for tj in 0..tw {
            gather_patch(x, c, h, w, p, ti, tj, &mut patch);
            let gt = &g_tokens[(ti * tw + tj) * d..(ti * tw + tj + 1) * d];
            let gprow = &mut gpos[(ti * wt_full + tj) * d..(ti * wt_full + tj + 1) * d];
            for o in 0..d {
                let g = gt[o];
                gprow[o] = gprow[o] + g;
                if g == F::zero() {
                    continue;
                }
                gb[o] = gb[o] + g;
                let gwrow = &mut gw[o * plen..(o + 1) * plen];
                for i in 0..plen {
                    gwrow[i] = gwrow[i] + g * patch[i];
                }
            }
        }
    }
}

/// Apply a head tokenwise and scatter patches back to pixel space.
fn head_fwd<F: Real>(
    trunk: &[F],
    head: &HeadParams<F>,
    out_c: usize,
    p: usize,
    d: usize,
    th: usize,
    tw: usize,
) -> Vec<F> {
    let (h, w) = (th * p, tw * p);
    let olen = head.bias.numel();
    let hw = head.weight.data();
    let hb = head.bias.data();
    let mut out = vec![F::zero(); out_c * h * w];
    let mut pvec = vec![F::zero(); olen];
    for ti in 0..th {
        for tj in 0..tw {
            let trow = &trunk[(ti * tw + tj) * d..(ti * tw + tj + 1) * d];
            for o in 0..olen {
                let wrow = &hw[o * d..(o + 1) * d];
                let mut acc = hb[o];
                for i in 0..d {
                    acc = acc + wrow[i] * trow[i];
                }
                pvec[o] = acc;
            }
            // Scatter (c, dy, dx) back to pixels.
            let mut o = 0;
            for ci in 0..out_c {
                for dy in 0..p {
                    let row = (ci * h + ti * p + dy) * w + tj * p;
                    out[row..row + p].copy_from_slice(&pvec[o..o + p]);
                    o += p;
                }
            }
        }
    }
    out
}

/// Backward of a head: accumulates weight/bias grads and the trunk gradient.
fn head_bwd<F: Real>(
    g_field: &[F],
    trunk: &[F],
    head: &HeadParams<F>,
    g_head: &mut HeadParams<F>,
    g_trunk: &mut [F],
    out_c: usize,
    p: usize,
    d: usize,
    th: usize,
    tw: usize,
) {
    let (h, w) = (th * p, tw * p);
    let olen = head.bias.numel();
    let hw = head.weight.data();
    let gw = g_head.weight.data_mut();
    let gb = g_head.bias.data_mut();
    let mut gvec = vec![F::zero(); olen];
    for ti in 0..th {
        for tj in 0..tw {
            let mut o = 0;
            for ci in 0..out_c {
                for dy in 0..p {
                    let row = (ci * h + ti * p + dy) * w + tj * p;
                    gvec[o..o + p].copy_from_slice(&g_field[row..row + p]);
                    o += p;
                }
            }
            let trow = &trunk[(ti * tw + tj) * d..(ti * tw + tj + 1) * d];
            let gt = &mut g_trunk[(ti * tw + tj) * d..(ti * tw + tj + 1) * d];
            for o in 0..olen {
                let g = gvec[o];
                if g == F::zero() {
                    continue;
                }
                gb[o] = gb[o] + g;
                let wrow = &hw[o * d..(o + 1) * d];
                let gwrow = &mut gw[o * d..(o + 1) * d];
                for i in 0..d {
                    gwrow[i] = gwrow[i] + g * trow[i];
                    gt[i] = gt[i] + wrow[i] * g;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Full passes
// ---------------------------------------------------------------------------

fn trunk_forward<F: Real>(
    params: &ModelParams<F>,
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
) -> Result<ForwardCache<F>, CoreError> {
    let (th, tw) = validate_input(params, x, c, h, w)?;
    let arch = &params.arch;
    let d = arch.embed_dim;
    let tokens = th * tw;
    let alpha = F::of(arch.residual_alpha());
    let mut t = embed_tokens(params, x, c, h, w, th, tw);
    let mut blocks = Vec::with_capacity(arch.blocks);
    for blk in &params.blocks {
        let t_in = t;
        // Sublayer 1: spectral filter in the configured wiring.
        let (after_s, ln1, spectral) = match arch.norm_mode {
            NormMode::Pre => {
                let (lno, ln1) = layer_norm_fwd(&t_in, &blk.ln1, tokens, d);
                let (f, sc) = spectral_fwd(&lno, &blk.spectral, arch, th, tw);
                let mut out = t_in.clone();
                for (o, fv) in out.iter_mut().zip(&f) {
                    *o = *o + *fv;
                }
                (out, ln1, sc)
            }
            NormMode::PostPlain | NormMode::PostDeepnorm => {
                let (f, sc) = spectral_fwd(&t_in, &blk.spectral, arch, th, tw);
                let mut v = vec![F::zero(); tokens * d];
                for i in 0..v.len() {
                    v[i] = alpha * t_in[i] + f[i];
                }
                let (out, ln1) = layer_norm_fwd(&v, &blk.ln1, tokens, d);
                (out, ln1, sc)
            }
        };
        let mid = after_s;
        // Sublayer 2: token MLP, same wiring.
        let (after_m, ln2, mlp) = match arch.norm_mode {
            NormMode::Pre => {
                let (lno, ln2) = layer_norm_fwd(&mid, &blk.ln2, tokens, d);
                let (f, mc) = mlp_fwd(&lno, &blk.mlp, tokens, d);
                let mut out = mid.clone();
                for (o, fv) in out.iter_mut().zip(&f) {
                    *o = *o + *fv;
                }
                (out, ln2, mc)
            }
            NormMode::PostPlain | NormMode::PostDeepnorm => {
                let (f, mc) = mlp_fwd(&mid, &blk.mlp, tokens, d);
                let mut v = vec![F::zero(); tokens * d];
                for i in 0..v.len() {
                    v[i] = alpha * mid[i] + f[i];
                }
                let (out, ln2) = layer_norm_fwd(&v, &blk.ln2, tokens, d);
                (out, ln2, mc)
            }
        };
        blocks.push(BlockCache { ln1, spectral, ln2, mlp });
        t = after_m;
    }

    let mut final_ln = None;
    if let Some(ln) = &params.final_ln {
        let (out, cache) = layer_norm_fwd(&t, ln, tokens, d);
        final_ln = Some(cache);
        t = out;
    }

    Ok(ForwardCache { th, tw, blocks, final_ln, trunk: t })
}

/// Forward pass returning decoded fields plus the cache for backward.
pub fn forward_cached<F: Real>(
    params: &ModelParams<F>,
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
) -> Result<(ModelOut<F>, ForwardCache<F>), CoreError> {
    let cache = trunk_forward(params, x, c, h, w)?;
    let arch = &params.arch;
    let d = arch.embed_dim;
    let value = head_fwd(&cache.trunk, &params.value_head, arch.channels, arch.patch, d, cache.th, cache.tw);
    let flow = params.flow_head.as_ref().map(|fh| {
        head_fwd(&cache.trunk, fh, arch.flow_channels(), arch.patch, d, cache.th, cache.tw)
    });
    Ok((ModelOut { value, flow }, cache))
}

/// Inference-only forward.
pub fn forward<F: Real>(
    params: &ModelParams<F>,
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
) -> Result<ModelOut<F>, CoreError> {
    forward_cached(params, x, c, h, w).map(|(out, _)| out)
}

/// Trunk token output, exposed for conditioning diagnostics.
pub fn trunk_tokens<F: Real>(
    params: &ModelParams<F>,
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
) -> Result<Vec<F>, CoreError> {
    trunk_forward(params, x, c, h, w).map(|c| c.trunk)
}

/// Backward pass. `g_value` and `g_flow` are gradients on the decoded fields;
/// parameter gradients are accumulated into `grads`.
pub fn backward<F: Real>(
    params: &ModelParams<F>,
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    cache: &ForwardCache<F>,
    g_value: &[F],
    g_flow: Option<&[F]>,
    grads: &mut ModelParams<F>,
) -> Result<(), CoreError> {
    let arch = &params.arch;
    let d = arch.embed_dim;
    let (th, tw) = (cache.th, cache.tw);
    let tokens = th * tw;
    let alpha = F::of(arch.residual_alpha());

    let mut g_trunk = vec![F::zero(); tokens * d];
    head_bwd(
        g_value,
        &cache.trunk,
        &params.value_head,
        &mut grads.value_head,
        &mut g_trunk,
        arch.channels,
        arch.patch,
        d,
        th,
        tw,
    );
    match (g_flow, &params.flow_head) {
        (Some(gf), Some(fh)) => {
            let gfh = grads.flow_head.as_mut().expect("flow head grads");
            head_bwd(gf, &cache.trunk, fh, gfh, &mut g_trunk, arch.flow_channels(), arch.patch, d, th, tw);
        }
        (None, _) => {}
        (Some(_), None) => {
            return Err(CoreError::InvalidConfig("flow gradient for a model without flow head".into()))
        }
    }

    let mut g = g_trunk;
    if let (Some(ln), Some(lnc)) = (&params.final_ln, &cache.final_ln) {
        let gln = grads.final_ln.as_mut().expect("final_ln grads");
        g = layer_norm_bwd(&g, lnc, ln, gln, tokens, d);
    }

    for (bi, blk) in params.blocks.iter().enumerate().rev() {
        let bc = &cache.blocks[bi];
        let gb = &mut grads.blocks[bi];
        // Sublayer 2 (MLP) backward.
        g = match arch.norm_mode {
            NormMode::Pre => {
                let g_f = &g;
                let g_lnout = mlp_bwd(g_f, &bc.mlp, &blk.mlp, &mut gb.mlp, tokens, d);
                let g_mid_ln = layer_norm_bwd(&g_lnout, &bc.ln2, &blk.ln2, &mut gb.ln2, tokens, d);
                let mut g_mid = g.clone();
                for i in 0..g_mid.len() {
                    g_mid[i] = g_mid[i] + g_mid_ln[i];
                }
                g_mid
            }
            _ => {
                let g_v = layer_norm_bwd(&g, &bc.ln2, &blk.ln2, &mut gb.ln2, tokens, d);
                let g_from_f = mlp_bwd(&g_v, &bc.mlp, &blk.mlp, &mut gb.mlp, tokens, d);
                let mut g_mid = vec![F::zero(); tokens * d];
                for i in 0..g_mid.len() {
                    g_mid[i] = alpha * g_v[i] + g_from_f[i];
                }
                g_mid
            }
        };
        // Sublayer 1 (spectral) backward.
        g = match arch.norm_mode {
            NormMode::Pre => {
                let g_lnout = spectral_bwd(&g, &bc.spectral, &blk.spectral, &mut gb.spectral, arch, th, tw);
                let g_in_ln = layer_norm_bwd(&g_lnout, &bc.ln1, &blk.ln1, &mut gb.ln1, tokens, d);
                let mut g_in = g.clone();
                for i in 0..g_in.len() {
                    g_in[i] = g_in[i] + g_in_ln[i];
                }
                g_in
            }
            _ => {
                let g_v = layer_norm_bwd(&g, &bc.ln1, &blk.ln1, &mut gb.ln1, tokens, d);
                let g_from_f = spectral_bwd(&g_v, &bc.spectral, &blk.spectral, &mut gb.spectral, arch, th, tw);
                let mut g_in = vec![F::zero(); tokens * d];
                for i in 0..g_in.len() {
                    g_in[i] = alpha * g_v[i] + g_from_f[i];
                }
                g_in
            }
        };
    }

    embed_bwd(&g, params, grads, x, c, h, w, th, tw);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::FlowMode;
    use crate::rng::RngStream;
    use crate::tensor::Tensor;

    fn tiny(norm: NormMode) -> ArchConfig {
        ArchConfig {
            grid_h: 8,
            grid_w: 8,
            channels: 2,
            patch: 2,
            embed_dim: 8,
            blocks: 1,
            norm_mode: norm,
            spectral_blocks: 4,
            mlp_ratio: 2,
            ..ArchConfig::desk_default()
        }
    }

    fn rand_input(n: usize, seed: u64) -> Vec<f64> {
        let mut r = RngStream::new(seed, 80);
        (0..n).map(|_| r.normal()).collect()
    }

    #[test]
    fn forward_shapes_and_finiteness() {
        for norm in [NormMode::Pre, NormMode::PostPlain, NormMode::PostDeepnorm] {
            let arch = tiny(norm);
            let p = ModelParams::<f64>::init(&arch, &mut RngStream::new(1, 2));
            let x = rand_input(2 * 8 * 8, 3);
            let out = forward(&p, &x, 2, 8, 8).unwrap();
            assert_eq!(out.value.len(), 2 * 8 * 8);
            assert_eq!(out.flow.as_ref().unwrap().len(), 2 * 8 * 8);
            assert!(out.value.iter().all(|v| v.is_finite()));
            assert!(out.flow.unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fresh_init_flow_is_exactly_zero() {
        let arch = tiny(NormMode::PostDeepnorm);
        let p = ModelParams::<f32>::init(&arch, &mut RngStream::new(5, 2));
        let x: Vec<f32> = rand_input(2 * 8 * 8, 4).iter().map(|&v| v as f32).collect();
        let out = forward(&p, &x, 2, 8, 8).unwrap();
        assert!(out.flow.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_channel_flow_output_shape() {
        let mut arch = tiny(NormMode::PostDeepnorm);
        arch.flow_mode = FlowMode::PerChannel;
        let p = ModelParams::<f64>::init(&arch, &mut RngStream::new(1, 2));
        let x = rand_input(2 * 8 * 8, 3);
        let out = forward(&p, &x, 2, 8, 8).unwrap();
        assert_eq!(out.flow.unwrap().len(), 4 * 8 * 8);
    }

    #[test]
    fn smaller_inputs_use_top_left_pos_block() {
        // Distinctive positional values, zero patch weights: tokens are pure
        // positional embedding, so a crop must reproduce the full grid's
        // top-left tokens.
        let arch = tiny(NormMode::PostDeepnorm);
        let mut p = ModelParams::<f64>::zeros(&arch);
        for (i, v) in p.pos_embed.data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let full = embed_tokens(&p, &vec![0.0; 2 * 8 * 8], 2, 8, 8, 4, 4);
        let crop = embed_tokens(&p, &vec![0.0; 2 * 4 * 4], 2, 4, 4, 2, 2);
        let d = arch.embed_dim;
        for ti in 0..2 {
            for tj in 0..2 {
                let f = &full[(ti * 4 + tj) * d..(ti * 4 + tj + 1) * d];
                let c = &crop[(ti * 2 + tj) * d..(ti * 2 + tj + 1) * d];
                assert_eq!(f, c, "token ({ti},{tj})");
            }
        }
    }

    #[test]
    fn rejects_wrong_shapes() {
        let arch = tiny(NormMode::PostDeepnorm);
        let p = ModelParams::<f64>::init(&arch, &mut RngStream::new(1, 2));
        // Wrong channel count.
        assert!(forward(&p, &vec![0.0; 3 * 8 * 8], 3, 8, 8).is_err());
        // Not tiled by patch.
        assert!(forward(&p, &vec![0.0; 2 * 5 * 8], 2, 5, 8).is_err());
        // Exceeds configured grid.
        assert!(forward(&p, &vec![0.0; 2 * 16 * 16], 2, 16, 16).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = tiny(NormMode::PostDeepnorm);
        let p = ModelParams::<f64>::init(&arch, &mut RngStream::new(9, 2));
        let x = rand_input(2 * 8 * 8, 10);
        let a = forward(&p, &x, 2, 8, 8).unwrap();
        let b = forward(&p, &x, 2, 8, 8).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.flow, b.flow);
    }

    #[test]
    fn norm_modes_change_the_function() {
        let x = rand_input(2 * 8 * 8, 11);
        let outs: Vec<Vec<f64>> = [NormMode::Pre, NormMode::PostPlain, NormMode::PostDeepnorm]
            .iter()
            .map(|&m| {
                let arch = tiny(m);
                // Same seed: comparable weights where shapes agree.
                let p = ModelParams::<f64>::init(&arch, &mut RngStream::new(7, 2));
                forward(&p, &x, 2, 8, 8).unwrap().value
            })
            .collect();
        assert_ne!(outs[0], outs[1]);
        assert_ne!(outs[1], outs[2]);
    }

    /// With identity complex weights, a large bias shift through the GELU's
    /// linear regime, and lambda = 0, the spectral sublayer reduces to
    /// ifft(fft(x)) = x.
    #[test]
    fn spectral_filter_with_identity_weights_passes_through() {
        let mut arch = tiny(NormMode::PostDeepnorm);
        arch.softshrink = 0.0;
        let bs = arch.embed_dim / arch.spectral_blocks;
        let mut p = ModelParams::<f64>::zeros(&arch);
        {
            let sp = &mut p.blocks[0].spectral;
            for part in [&mut sp.l1, &mut sp.l2] {
                for k in 0..arch.spectral_blocks {
                    for o in 0..bs {
                        part.w_re.data_mut()[(k * bs + o) * bs + o] = 1.0;
                    }
                }
            }
            let shift = 40.0;
            sp.l1.b_re.data_mut().iter_mut().for_each(|v| *v = shift);
            sp.l1.b_im.data_mut().iter_mut().for_each(|v| *v = shift);
            sp.l2.b_re.data_mut().iter_mut().for_each(|v| *v = -shift);
            sp.l2.b_im.data_mut().iter_mut().for_each(|v| *v = -shift);
        }
        let t_in = rand_input(16 * 8, 12);
        let (out, _) = spectral_fwd(&t_in, &p.blocks[0].spectral, &arch, 4, 4);
        for i in 0..t_in.len() {
            assert!((out[i] - t_in[i]).abs() < 1e-9, "at {i}: {} vs {}", out[i], t_in[i]);
        }
    }

    /// kept_modes = 0.5 must kill a pure Nyquist pattern (its folded frequency
    /// exceeds half the limit) while passing a DC pattern through.
    #[test]
    fn mode_mask_filters_high_frequencies() {
        let mut arch = tiny(NormMode::PostDeepnorm);
        arch.softshrink = 0.0;
        arch.kept_modes = 0.5;
        let bs = arch.embed_dim / arch.spectral_blocks;
        let mut p = ModelParams::<f64>::zeros(&arch);
        {
            let sp = &mut p.blocks[0].spectral;
            for part in [&mut sp.l1, &mut sp.l2] {
                for k in 0..arch.spectral_blocks {
                    for o in 0..bs {
                        part.w_re.data_mut()[(k * bs + o) * bs + o] = 1.0;
                    }
                }
            }
            let shift = 40.0;
            sp.l1.b_re.data_mut().iter_mut().for_each(|v| *v = shift);
            sp.l1.b_im.data_mut().iter_mut().for_each(|v| *v = shift);
            sp.l2.b_re.data_mut().iter_mut().for_each(|v| *v = -shift);
            sp.l2.b_im.data_mut().iter_mut().for_each(|v| *v = -shift);
        }
        let (th, tw, d) = (4, 4, arch.embed_dim);
        // Nyquist in both token axes: (-1)^(ti+tj).
        let mut nyq = vec![0.0f64; th * tw * d];
        for ti in 0..th {
            for tj in 0..tw {
                let s = if (ti + tj) % 2 == 0 { 1.0 } else { -1.0 };
                for e in 0..d {
                    nyq[(ti * tw + tj) * d + e] = s;
                }
            }
        }
        let (out, _) = spectral_fwd(&nyq, &p.blocks[0].spectral, &arch, th, tw);
        assert!(out.iter().all(|v| v.abs() < 1e-9), "nyquist leaked: {:?}", &out[..4]);
        let dc = vec![1.5f64; th * tw * d];
        let (out_dc, _) = spectral_fwd(&dc, &p.blocks[0].spectral, &arch, th, tw);
        for v in out_dc {
            assert!((v - 1.5).abs() < 1e-9);
        }
    }

    /// Deep-norm trunk conditioning at init: the response to a small input
    /// perturbation stays within [0.1, 10] for N in {4, 8, 16}.
    #[test]
    fn deepnorm_trunk_response_ratio_is_bounded() {
        for blocks in [4usize, 8, 16] {
            let mut arch = tiny(NormMode::PostDeepnorm);
            arch.blocks = blocks;
            let p = ModelParams::<f64>::init(&arch, &mut RngStream::new(21, 2));
            let x = rand_input(2 * 8 * 8, 22);
            let mut dx = rand_input(2 * 8 * 8, 23);
            let scale = 1e-3;
            dx.iter_mut().for_each(|v| *v *= scale);
            let x2: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let t1 = trunk_tokens(&p, &x, 2, 8, 8).unwrap();
            let t2 = trunk_tokens(&p, &x2, 2, 8, 8).unwrap();
            let dout: f64 = t1.iter().zip(&t2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let din: f64 = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ratio = dout / din;
            assert!(
                (0.1..=10.0).contains(&ratio),
                "N={blocks}: response ratio {ratio}"
            );
        }
    }

    #[test]
    fn backward_accumulates_into_existing_grads() {
        // Two backward calls double the gradient exactly.
        let arch = tiny(NormMode::PostDeepnorm);
        let p = ModelParams::<f64>::init_dense(&arch, &mut RngStream::new(31, 2));
        let x = rand_input(2 * 8 * 8, 32);
        let gv = rand_input(2 * 8 * 8, 33);
        let gf = rand_input(2 * 8 * 8, 34);
        let (_, cache) = forward_cached(&p, &x, 2, 8, 8).unwrap();
        let mut g1 = p.zeros_like();
        backward(&p, &x, 2, 8, 8, &cache, &gv, Some(&gf), &mut g1).unwrap();
        let mut g2 = p.zeros_like();
        backward(&p, &x, 2, 8, 8, &cache, &gv, Some(&gf), &mut g2).unwrap();
        backward(&p, &x, 2, 8, 8, &cache, &gv, Some(&gf), &mut g2).unwrap();
        for ((n1, t1), (_, t2)) in g1.named_tensors().iter().zip(g2.named_tensors().iter()) {
            for (a, b) in t1.data().iter().zip(t2.data()) {
                assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{n1}");
            }
        }
    }

    #[test]
    fn value_head_bias_gradient_is_exact() {
        // d(sum of outputs)/d(value bias o) = number of tokens carrying o.
        let arch = tiny(NormMode::PostDeepnorm);
        let p = ModelParams::<f64>::init(&arch, &mut RngStream::new(41, 2));
        let x = rand_input(2 * 8 * 8, 42);
        let (_, cache) = forward_cached(&p, &x, 2, 8, 8).unwrap();
        let gv = vec![1.0; 2 * 8 * 8];
        let mut grads = p.zeros_like();
        backward(&p, &x, 2, 8, 8, &cache, &gv, None, &mut grads).unwrap();
        // 16 tokens, each bias element used once per token.
        let gb: &Tensor<f64> = &grads.value_head.bias;
        assert!(gb.data().iter().all(|&v| (v - 16.0).abs() < 1e-12));
    }
}
