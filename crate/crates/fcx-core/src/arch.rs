//! Architecture descriptor for the spectral transformer.

use alloc::format;

use crate::error::CoreError;

/// Where layer norm sits relative to each residual sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum NormMode {
    /// `x + F(LN(x))`, with one extra LN after the final block.
    Pre,
    /// `LN(x + F(x))` — the classic post-norm wiring.
    PostPlain,
    /// `LN(alpha * x + F(x))` with deep-norm constants; the default.
    PostDeepnorm,
}

/// Shape of the displacement field emitted by the flow head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FlowMode {
    /// One (dx, dy) pair shared by all channels.
    Shared2,
    /// An independent (dx, dy) pair per channel.
    PerChannel,
}

/// Everything needed to build the model and interpret a checkpoint.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ArchConfig {
    /// Full grid the positional embedding covers; training crops may be smaller.
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    /// Square patch edge in pixels.
    pub patch: usize,
    pub embed_dim: usize,
    /// Number of residual transformer blocks (N).
    pub blocks: usize,
    pub norm_mode: NormMode,
    /// Block-diagonal factor of the spectral MLP.
    pub spectral_blocks: usize,
    /// Soft-shrinkage threshold applied to spectral MLP output.
    pub softshrink: f64,
    /// Fraction of Fourier modes kept per axis, in (0, 1].
    pub kept_modes: f64,
    pub flow_mode: FlowMode,
    /// When false the model has no flow head and predictions are `value + input`.
    pub flow_enabled: bool,
    /// Token-MLP hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::desk_default()
    }
}

impl ArchConfig {
    /// The default desk-scale configuration: 32x64 grid, 4 channels, patch 4,
    /// embed 64, 8 deep-norm blocks.
    pub fn desk_default() -> Self {
        ArchConfig {
            grid_h: 32,
            grid_w: 64,
            channels: 4,
            patch: 4,
            embed_dim: 64,
            blocks: 8,
            norm_mode: NormMode::PostDeepnorm,
            spectral_blocks: 4,
            softshrink: 0.01,
            kept_modes: 1.0,
            flow_mode: FlowMode::Shared2,
            flow_enabled: true,
            mlp_ratio: 2,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        let bad = |m: alloc::string::String| Err(CoreError::InvalidConfig(m));
        if self.grid_h == 0 || self.grid_w == 0 || self.grid_h % 2 != 0 || self.grid_w % 2 != 0 {
            return bad(format!("grid {}x{} must be even and nonzero", self.grid_h, self.grid_w));
        }
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if self.patch == 0 || self.grid_h % self.patch != 0 || self.grid_w % self.patch != 0 {
            return bad(format!(
                "patch {} must divide grid {}x{}",
                self.patch, self.grid_h, self.grid_w
            ));
        }
        if self.embed_dim == 0 || self.spectral_blocks == 0
            || self.embed_dim % self.spectral_blocks != 0
        {
            return bad(format!(
                "spectral_blocks {} must divide embed_dim {}",
                self.spectral_blocks, self.embed_dim
            ));
        }
        if self.blocks == 0 {
            return bad("blocks must be >= 1".into());
        }
        if !(self.kept_modes > 0.0 && self.kept_modes <= 1.0) {
            return bad(format!("kept_modes {} must be in (0, 1]", self.kept_modes));
        }
        if !(self.softshrink >= 0.0) || !self.softshrink.is_finite() {
            return bad(format!("softshrink {} must be finite and >= 0", self.softshrink));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        Ok(())
    }

    /// Token-grid dims for an input of `h x w` pixels. Errors when the patch
    /// does not tile it or it exceeds the configured grid.
    pub fn token_dims(&self, h: usize, w: usize) -> Result<(usize, usize), CoreError> {
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return Err(CoreError::ShapeMismatch(format!(
                "input {h}x{w} is not tiled by patch {}",
                self.patch
            )));
        }
        if h > self.grid_h || w > self.grid_w {
            return Err(CoreError::ShapeMismatch(format!(
                "input {h}x{w} exceeds configured grid {}x{}",
                self.grid_h, self.grid_w
            )));
        }
        Ok((h / self.patch, w / self.patch))
    }

    /// Channels of the flow field: 2 shared or 2 per data channel.
    pub fn flow_channels(&self) -> usize {
        match self.flow_mode {
            FlowMode::Shared2 => 2,
            FlowMode::PerChannel => 2 * self.channels,
        }
    }

    /// Pixels per patch times data channels: the patch-vector length.
    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    /// Residual scale on the skip path: `(2N)^(1/4)` for deep-norm, else 1.
    pub fn residual_alpha(&self) -> f64 {
        match self.norm_mode {
            NormMode::PostDeepnorm => libm::pow(2.0 * self.blocks as f64, 0.25),
            _ => 1.0,
        }
    }

    /// Init scale on sublayer/head projections: `(8N)^(-1/4)` for deep-norm, else 1.
    pub fn init_beta(&self) -> f64 {
        match self.norm_mode {
            NormMode::PostDeepnorm => libm::pow(8.0 * self.blocks as f64, -0.25),
            _ => 1.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deepnorm_constants_match_closed_form() {
        let mut a = ArchConfig::desk_default();
        a.blocks = 8;
        // (2*8)^(1/4) = 2 exactly; (8*8)^(-1/4) = 1/(2*sqrt(2)).
        assert_eq!(a.residual_alpha(), 2.0);
        assert!((a.init_beta() - 0.35355339059327373).abs() < 1e-15);
        a.blocks = 1;
        assert!((a.residual_alpha() - 1.189207115002721).abs() < 1e-15);
    }

    #[test]
    fn non_deepnorm_modes_use_unit_scales() {
        let mut a = ArchConfig::desk_default();
        a.norm_mode = NormMode::Pre;
        assert_eq!(a.residual_alpha(), 1.0);
        assert_eq!(a.init_beta(), 1.0);
        a.norm_mode = NormMode::PostPlain;
        assert_eq!(a.residual_alpha(), 1.0);
        assert_eq!(a.init_beta(), 1.0);
    }

    #[test]
    fn desk_default_validates() {
        ArchConfig::desk_default().validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_divisibility() {
        let mut a = ArchConfig::desk_default();
        a.patch = 5;
        assert!(a.validate().is_err());
        let mut b = ArchConfig::desk_default();
        b.spectral_blocks = 5;
        assert!(b.validate().is_err());
        let mut c = ArchConfig::desk_default();
        c.kept_modes = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_dims_checks_fit() {
        let a = ArchConfig::desk_default();
        assert_eq!(a.token_dims(32, 64).unwrap(), (8, 16));
        assert_eq!(a.token_dims(16, 32).unwrap(), (4, 8));
        assert!(a.token_dims(16, 33).is_err());
        assert!(a.token_dims(64, 64).is_err());
    }

    #[test]
    fn flow_channels_by_mode() {
        let mut a = ArchConfig::desk_default();
        assert_eq!(a.flow_channels(), 2);
        a.flow_mode = FlowMode::PerChannel;
        assert_eq!(a.flow_channels(), 8);
    }
}
