//! Typed model parameters, canonical naming, and initialization.
//!
//! Every consumer that walks parameters — optimizer, checkpoint writer,
//! gradient checker — uses the same canonical order defined by
//! [`ModelParams::named_tensors`], so slot indices and serialized layouts
//! always agree.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::arch::{ArchConfig, NormMode};
use crate::error::CoreError;
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<F> {
    pub gain: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Block-diagonal complex linear map: `w` is `(blocks, out, in)` per part,
/// `b` is `(blocks, out)` per part.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexLinearParams<F> {
    pub w_re: Tensor<F>,
    pub w_im: Tensor<F>,
    pub b_re: Tensor<F>,
    pub b_im: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralParams<F> {
    pub l1: ComplexLinearParams<F>,
    pub l2: ComplexLinearParams<F>,
}

/// Token-wise two-layer MLP: w1 `(hidden, d)`, w2 `(d, hidden)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1: LayerNormParams<F>,
    pub spectral: SpectralParams<F>,
    pub ln2: LayerNormParams<F>,
    pub mlp: MlpParams<F>,
}

/// Linear decoder head: weight `(out, d)`, bias `(out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub arch: ArchConfig,
    /// Patch embedding: `(embed_dim, patch*patch*channels)` plus bias.
    pub patch_weight: Tensor<F>,
    pub patch_bias: Tensor<F>,
    /// Learned positional embedding over the full token grid `(ht, wt, d)`.
    /// Smaller inputs use the top-left sub-block.
    pub pos_embed: Tensor<F>,
    pub blocks: Vec<BlockParams<F>>,
    /// Trailing trunk norm; present only in pre-norm wiring.
    pub final_ln: Option<LayerNormParams<F>>,
    pub value_head: HeadParams<F>,
    /// Absent when `arch.flow_enabled` is false.
    pub flow_head: Option<HeadParams<F>>,
}

impl<F: Real> LayerNormParams<F> {
    fn zeros(d: usize) -> Self {
        LayerNormParams { gain: Tensor::zeros(&[d]), bias: Tensor::zeros(&[d]) }
    }
}

impl<F: Real> ModelParams<F> {
    /// All-zero parameters with the right shapes; the template for gradients
    /// and optimizer state.
    pub fn zeros(arch: &ArchConfig) -> Self {
        let d = arch.embed_dim;
        let b = arch.spectral_blocks;
        let bs = d / b;
        let hidden = d * arch.mlp_ratio;
        let (ht, wt) = (arch.grid_h / arch.patch, arch.grid_w / arch.patch);
        let plen = arch.patch_len();
        let blocks = (0..arch.blocks)
            .map(|_| BlockParams {
                ln1: LayerNormParams::zeros(d),
                spectral: SpectralParams {
                    l1: ComplexLinearParams {
                        w_re: Tensor::zeros(&[b, bs, bs]),
                        w_im: Tensor::zeros(&[b, bs, bs]),
                        b_re: Tensor::zeros(&[b, bs]),
                        b_im: Tensor::zeros(&[b, bs]),
                    },
                    l2: ComplexLinearParams {
                        w_re: Tensor::zeros(&[b, bs, bs]),
                        w_im: Tensor::zeros(&[b, bs, bs]),
                        b_re: Tensor::zeros(&[b, bs]),
                        b_im: Tensor::zeros(&[b, bs]),
                    },
                },
                ln2: LayerNormParams::zeros(d),
                mlp: MlpParams {
                    w1: Tensor::zeros(&[hidden, d]),
                    b1: Tensor::zeros(&[hidden]),
                    w2: Tensor::zeros(&[d, hidden]),
                    b2: Tensor::zeros(&[d]),
                },
            })
            .collect();
        ModelParams {
            arch: arch.clone(),
            patch_weight: Tensor::zeros(&[d, plen]),
            patch_bias: Tensor::zeros(&[d]),
            pos_embed: Tensor::zeros(&[ht, wt, d]),
            blocks,
            final_ln: match arch.norm_mode {
                NormMode::Pre => Some(LayerNormParams::zeros(d)),
                _ => None,
            },
            value_head: HeadParams {
                weight: Tensor::zeros(&[plen, d]),
                bias: Tensor::zeros(&[plen]),
            },
            flow_head: arch.flow_enabled.then(|| {
                let flen = arch.patch * arch.patch * arch.flow_channels();
                HeadParams { weight: Tensor::zeros(&[flen, d]), bias: Tensor::zeros(&[flen]) }
            }),
        }
    }

    /// Fresh training initialization. Weights are drawn in canonical tensor
    /// order from `rng`, so the same `(seed, stream)` always yields the same
    /// model. Deep-norm wiring scales sublayer and head projections by beta;
    /// the flow head and positional embedding start at exactly zero.
    pub fn init(arch: &ArchConfig, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(arch);
        let beta = arch.init_beta();
        xavier(&mut p.patch_weight, rng, 1.0);
        for blk in &mut p.blocks {
            blk.ln1.gain.fill(F::one());
            blk.ln2.gain.fill(F::one());
            normal(&mut blk.spectral.l1.w_re, rng, 0.02 * beta);
            normal(&mut blk.spectral.l1.w_im, rng, 0.02 * beta);
            normal(&mut blk.spectral.l2.w_re, rng, 0.02 * beta);
            normal(&mut blk.spectral.l2.w_im, rng, 0.02 * beta);
            xavier(&mut blk.mlp.w1, rng, beta);
            xavier(&mut blk.mlp.w2, rng, beta);
        }
        if let Some(ln) = &mut p.final_ln {
            ln.gain.fill(F::one());
        }
        xavier(&mut p.value_head.weight, rng, beta);
        p
    }

    /// Dense random initialization for gradient checking: every tensor,
    /// including the normally-zero flow head, bias vectors, and positional
    /// embedding, gets nonzero values so every gradient path is exercised.
    pub fn init_dense(arch: &ArchConfig, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(arch);
        for (name, t) in p.named_tensors_mut() {
            if name.ends_with("gain") {
                for v in t.data_mut() {
                    *v = F::of(1.0 + 0.2 * rng.normal());
                }
            } else {
                let scale = if name.contains("bias") || name.contains(".b1")
                    || name.contains(".b2") || name == "pos_embed"
                {
                    0.05
                } else {
                    0.2
                };
                normal(t, rng, scale);
            }
        }
        p
    }

    /// Canonical `(name, tensor)` pairs in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = Vec::new();
        out.push(("patch_embed.weight".into(), &self.patch_weight));
        out.push(("patch_embed.bias".into(), &self.patch_bias));
        out.push(("pos_embed".into(), &self.pos_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), &b.ln1.gain));
            out.push((format!("blocks.{i}.ln1.bias"), &b.ln1.bias));
            out.push((format!("blocks.{i}.spectral.w1.re"), &b.spectral.l1.w_re));
            out.push((format!("blocks.{i}.spectral.w1.im"), &b.spectral.l1.w_im));
            out.push((format!("blocks.{i}.spectral.b1.re"), &b.spectral.l1.b_re));
            out.push((format!("blocks.{i}.spectral.b1.im"), &b.spectral.l1.b_im));
            out.push((format!("blocks.{i}.spectral.w2.re"), &b.spectral.l2.w_re));
            out.push((format!("blocks.{i}.spectral.w2.im"), &b.spectral.l2.w_im));
            out.push((format!("blocks.{i}.spectral.b2.re"), &b.spectral.l2.b_re));
            out.push((format!("blocks.{i}.spectral.b2.im"), &b.spectral.l2.b_im));
            out.push((format!("blocks.{i}.ln2.gain"), &b.ln2.gain));
            out.push((format!("blocks.{i}.ln2.bias"), &b.ln2.bias));
            out.push((format!("blocks.{i}.mlp.w1"), &b.mlp.w1));
            out.push((format!("blocks.{i}.mlp.b1"), &b.mlp.b1));
            out.push((format!("blocks.{i}.mlp.w2"), &b.mlp.w2));
            out.push((format!("blocks.{i}.mlp.b2"), &b.mlp.b2));
        }
        if let Some(ln) = &self.final_ln {
            out.push(("final_ln.gain".into(), &ln.gain));
            out.push(("final_ln.bias".into(), &ln.bias));
        }
        out.push(("value_head.weight".into(), &self.value_head.weight));
        out.push(("value_head.bias".into(), &self.value_head.bias));
        if let Some(fh) = &self.flow_head {
            out.push(("flow_head.weight".into(), &fh.weight));
            out.push(("flow_head.bias".into(), &fh.bias));
        }
        out
    }

    /// Mutable variant of [`named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let ModelParams {
            arch: _,
            patch_weight,
            patch_bias,
            pos_embed,
            blocks,
            final_ln,
            value_head,
            flow_head,
        } = self;
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        out.push(("patch_embed.weight".into(), patch_weight));
        out.push(("patch_embed.bias".into(), patch_bias));
        out.push(("pos_embed".into(), pos_embed));
        for (i, b) in blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.ln1.gain"), &mut b.ln1.gain));
            out.push((format!("blocks.{i}.ln1.bias"), &mut b.ln1.bias));
            out.push((format!("blocks.{i}.spectral.w1.re"), &mut b.spectral.l1.w_re));
            out.push((format!("blocks.{i}.spectral.w1.im"), &mut b.spectral.l1.w_im));
            out.push((format!("blocks.{i}.spectral.b1.re"), &mut b.spectral.l1.b_re));
            out.push((format!("blocks.{i}.spectral.b1.im"), &mut b.spectral.l1.b_im));
            out.push((format!("blocks.{i}.spectral.w2.re"), &mut b.spectral.l2.w_re));
            out.push((format!("blocks.{i}.spectral.w2.im"), &mut b.spectral.l2.w_im));
            out.push((format!("blocks.{i}.spectral.b2.re"), &mut b.spectral.l2.b_re));
            out.push((format!("blocks.{i}.spectral.b2.im"), &mut b.spectral.l2.b_im));
            out.push((format!("blocks.{i}.ln2.gain"), &mut b.ln2.gain));
            out.push((format!("blocks.{i}.ln2.bias"), &mut b.ln2.bias));
            out.push((format!("blocks.{i}.mlp.w1"), &mut b.mlp.w1));
            out.push((format!("blocks.{i}.mlp.b1"), &mut b.mlp.b1));
            out.push((format!("blocks.{i}.mlp.w2"), &mut b.mlp.w2));
            out.push((format!("blocks.{i}.mlp.b2"), &mut b.mlp.b2));
        }
        if let Some(ln) = final_ln {
            out.push(("final_ln.gain".into(), &mut ln.gain));
            out.push(("final_ln.bias".into(), &mut ln.bias));
        }
        out.push(("value_head.weight".into(), &mut value_head.weight));
        out.push(("value_head.bias".into(), &mut value_head.bias));
        if let Some(fh) = flow_head {
            out.push(("flow_head.weight".into(), &mut fh.weight));
            out.push(("flow_head.bias".into(), &mut fh.bias));
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch)
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Error naming the first tensor containing a non-finite value, if any.
    pub fn validate_finite(&self) -> Result<(), CoreError> {
        for (name, t) in self.named_tensors() {
            if !t.is_finite() {
                return Err(CoreError::NonFinite(alloc::format!(
                    "parameter tensor {} contains a non-finite value",
                    name
                )));
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        let mut out = ModelParams::<G>::zeros(&self.arch);
        let src = self.named_tensors();
        for ((sn, st), (dn, dt)) in src.into_iter().zip(out.named_tensors_mut()) {
            debug_assert_eq!(sn, dn);
            for (d, s) in dt.data_mut().iter_mut().zip(st.data()) {
                *d = G::of(s.as_f64());
            }
        }
        out
    }
}

fn normal<F: Real>(t: &mut Tensor<F>, rng: &mut RngStream, std: f64) {
    for v in t.data_mut() {
        *v = F::of(std * rng.normal());
    }
}

/// Xavier-uniform for a `(fan_out, fan_in)`-shaped map, times `scale`.
fn xavier<F: Real>(t: &mut Tensor<F>, rng: &mut RngStream, scale: f64) {
    let shape = t.shape();
    let (fan_out, fan_in) = (shape[0], shape[1..].iter().product::<usize>());
    let limit = scale * libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    for v in t.data_mut() {
        *v = F::of(limit * (2.0 * rng.uniform() - 1.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::FlowMode;

    fn tiny() -> ArchConfig {
        ArchConfig {
            grid_h: 8,
            grid_w: 8,
            channels: 2,
            patch: 2,
            embed_dim: 8,
            blocks: 2,
            spectral_blocks: 4,
            mlp_ratio: 2,
            ..ArchConfig::desk_default()
        }
    }

    #[test]
    fn canonical_order_is_stable_and_complete() {
        let p = ModelParams::<f32>::zeros(&tiny());
        let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "patch_embed.weight");
        assert_eq!(names[2], "pos_embed");
        assert_eq!(names[3], "blocks.0.ln1.gain");
        assert!(names.contains(&"blocks.1.mlp.w2".into()));
        assert_eq!(names[names.len() - 2], "flow_head.weight");
        // 3 stem + 2 blocks * 16 + 2 value + 2 flow.
        assert_eq!(names.len(), 3 + 2 * 16 + 4);
        // Mutable walk agrees.
        let mut q = ModelParams::<f32>::zeros(&tiny());
        let mut_names: Vec<String> = q.named_tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn flow_disabled_drops_head() {
        let mut a = tiny();
        a.flow_enabled = false;
        let p = ModelParams::<f32>::zeros(&a);
        assert!(p.flow_head.is_none());
        assert!(!p.named_tensors().iter().any(|(n, _)| n.starts_with("flow_head")));
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = tiny();
        let p1 = ModelParams::<f32>::init(&a, &mut RngStream::new(9, 2));
        let p2 = ModelParams::<f32>::init(&a, &mut RngStream::new(9, 2));
        let p3 = ModelParams::<f32>::init(&a, &mut RngStream::new(10, 2));
        assert_eq!(p1, p2);
        assert_ne!(p1, p3);
    }

    #[test]
    fn init_zeroes_flow_head_and_pos_embed() {
        let p = ModelParams::<f32>::init(&tiny(), &mut RngStream::new(1, 2));
        let fh = p.flow_head.as_ref().unwrap();
        assert!(fh.weight.data().iter().all(|&v| v == 0.0));
        assert!(fh.bias.data().iter().all(|&v| v == 0.0));
        assert!(p.pos_embed.data().iter().all(|&v| v == 0.0));
        assert!(p.patch_weight.data().iter().any(|&v| v != 0.0));
        assert!(p.blocks[0].ln1.gain.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn deepnorm_beta_shrinks_sublayer_weights() {
        let mut pre = tiny();
        pre.norm_mode = NormMode::Pre;
        let mut dn = tiny();
        dn.norm_mode = NormMode::PostDeepnorm;
        // Same draws, different scale: the ratio of norms is exactly beta.
        let p_pre = ModelParams::<f64>::init(&pre, &mut RngStream::new(4, 4));
        let p_dn = ModelParams::<f64>::init(&dn, &mut RngStream::new(4, 4));
        let beta = dn.init_beta();
        let r = p_dn.blocks[0].mlp.w1.l2_norm() / p_pre.blocks[0].mlp.w1.l2_norm();
        assert!((r - beta).abs() < 1e-12, "ratio {r} vs beta {beta}");
        let rv = p_dn.value_head.weight.l2_norm() / p_pre.value_head.weight.l2_norm();
        assert!((rv - beta).abs() < 1e-12);
    }

    #[test]
    fn pre_mode_has_final_ln() {
        let mut a = tiny();
        a.norm_mode = NormMode::Pre;
        assert!(ModelParams::<f32>::zeros(&a).final_ln.is_some());
        a.norm_mode = NormMode::PostDeepnorm;
        assert!(ModelParams::<f32>::zeros(&a).final_ln.is_none());
    }

    #[test]
    fn per_channel_flow_head_shape() {
        let mut a = tiny();
        a.flow_mode = FlowMode::PerChannel;
        let p = ModelParams::<f32>::zeros(&a);
        let fh = p.flow_head.as_ref().unwrap();
        // patch^2 * 2C = 4 * 4 = 16 outputs.
        assert_eq!(fh.weight.shape(), &[16, 8]);
    }

    #[test]
    fn cast_preserves_structure() {
        let p = ModelParams::<f32>::init(&tiny(), &mut RngStream::new(3, 1));
        let q: ModelParams<f64> = p.cast();
        assert_eq!(p.num_params(), q.num_params());
        let a = p.named_tensors();
        let b = q.named_tensors();
        for ((an, at), (bn, bt)) in a.iter().zip(b.iter()) {
            assert_eq!(an, bn);
            assert_eq!(at.shape(), bt.shape());
        }
    }
}
