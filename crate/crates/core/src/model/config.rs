use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Residual blocks per encoder stage (ResNet-34 layout).
pub const STAGE_BLOCKS: [usize; 4] = [3, 4, 6, 3];
/// Stage widths before width scaling.
pub const STAGE_WIDTHS: [usize; 4] = [64, 128, 256, 512];
/// Transposed-convolution widths of the longest decoder chain, before scaling.
pub const DECODER_CHAIN: [usize; 5] = [64, 32, 16, 8, 4];
pub const DECODER_FUSE_WIDTH: usize = 16;
pub const EMBED_WIDTH: usize = 512;

/// Architecture hyperparameters; every tensor shape derives from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub width_mult: f64,
    pub num_tasks: usize,
    pub num_groups: usize,
    pub embed_dim: usize,
    pub out_channels: usize,
}

impl ModelConfig {
    /// Full-size configuration: 192x192 inputs, unit width, reconstruction output.
    pub fn paper(num_tasks: usize, num_groups: usize) -> Self {
        Self::scaled(192, 1.0, num_tasks, num_groups)
    }

    /// CPU profile used for the synthetic experiments.
    pub fn desk(num_tasks: usize, num_groups: usize) -> Self {
        Self::scaled(96, 0.25, num_tasks, num_groups)
    }

    /// Smallest profile, meant for finite-difference checks in double precision.
    pub fn micro(num_tasks: usize, num_groups: usize) -> Self {
        Self::scaled(32, 1.0 / 16.0, num_tasks, num_groups)
    }

    pub fn scaled(input_size: usize, width_mult: f64, num_tasks: usize, num_groups: usize) -> Self {
        Self {
            input_size,
            in_channels: 3,
            width_mult,
            num_tasks,
            num_groups,
            embed_dim: scale(EMBED_WIDTH, width_mult),
            out_channels: 3,
        }
    }

    pub fn with_out_channels(mut self, n: usize) -> Self {
        self.out_channels = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if !(self.width_mult.is_finite() && self.width_mult > 0.0) {
            return Err(Error::Config(format!("width multiplier {} must be positive", self.width_mult)));
        }
        if let Some(c) = self.stage_widths().iter().find(|&&c| c < 4) {
            return Err(Error::Config(format!(
                "width multiplier {} gives a {c}-channel stage (need >= 4)",
                self.width_mult
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_tasks == 0 || self.num_groups == 0 {
            return Err(Error::Config("task and group counts must be positive".into()));
        }
        if self.embed_dim == 0 || self.out_channels == 0 {
            return Err(Error::Config("embed_dim and out_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn stem_width(&self) -> usize {
        scale(STAGE_WIDTHS[0], self.width_mult)
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        STAGE_WIDTHS.map(|c| scale(c, self.width_mult))
    }

    /// Output widths of V2, V3, V4.
    pub fn fusion_widths(&self) -> [usize; 3] {
        let w = self.stage_widths();
        [w[1], w[2], w[3]]
    }

    pub fn fused_dim(&self) -> usize {
        self.fusion_widths().iter().sum()
    }

    pub fn head_width(&self) -> usize {
        scale(EMBED_WIDTH, self.width_mult)
    }

    /// Channel schedule of the up-chain that starts at encoder stage `level` (1..=4).
    pub fn decoder_chain(&self, level: usize) -> Vec<usize> {
        assert!((1..=4).contains(&level));
        DECODER_CHAIN[4 - level..]
            .iter()
            .map(|&c| scale_min1(c, self.width_mult))
            .collect()
    }

    pub fn decoder_fuse_width(&self) -> usize {
        scale_min1(DECODER_FUSE_WIDTH, self.width_mult)
    }

    /// `(height, channels)` of conv1-1, conv1-2 and layer-1..4 outputs.
    pub fn encoder_shapes(&self) -> [(usize, usize); 6] {
        let s = self.input_size;
        let w = self.stage_widths();
        [
            (s, self.stem_width()),
            (s / 2, self.stem_width()),
            (s / 4, w[0]),
            (s / 8, w[1]),
            (s / 16, w[2]),
            (s / 32, w[3]),
        ]
    }
}

/// `round(w * c)`, used for encoder and head widths.
pub fn scale(c: usize, w: f64) -> usize {
    (c as f64 * w).round() as usize
}

/// Decoder widths shrink below 4 at small multipliers; keep at least one channel.
pub fn scale_min1(c: usize, w: f64) -> usize {
    scale(c, w).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_shapes() {
        let cfg = ModelConfig::paper(8, 4);
        cfg.validate().unwrap();
        assert_eq!(
            cfg.encoder_shapes(),
            [(192, 64), (96, 64), (48, 64), (24, 128), (12, 256), (6, 512)]
        );
        assert_eq!(cfg.fused_dim(), 896);
        assert_eq!(cfg.embed_dim, 512);
        assert_eq!(cfg.decoder_chain(4), vec![64, 32, 16, 8, 4]);
        assert_eq!(cfg.decoder_chain(1), vec![8, 4]);
    }

    #[test]
    fn desk_profile_scales() {
        let cfg = ModelConfig::desk(4, 2);
        cfg.validate().unwrap();
        assert_eq!(cfg.encoder_shapes()[5], (3, 128));
        assert_eq!(cfg.fused_dim(), 224);
        assert_eq!(cfg.embed_dim, 128);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(ModelConfig::scaled(100, 1.0, 2, 1).validate().is_err());
        assert!(ModelConfig::scaled(96, 0.03, 2, 1).validate().is_err());
        assert!(ModelConfig::micro(2, 1).validate().is_ok());
    }
}
