//! Model-wide architecture configuration shared by the pose encoder,
//! reference encoder, aggregator, and denoiser.

use crate::error::{Error, Result};

/// Width/depth knobs for the whole model. The down/mid/up block counts are
/// fixed at 4/1/4; everything else is configurable.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frame height = width in pixels. Must be divisible by `codec_block`.
    pub resolution: usize,
    /// Number of reference images N_r.
    pub n_refs: usize,
    /// Space-to-depth factor of the latent codec.
    pub codec_block: usize,
    /// Channel width of the shallowest U-Net level; deeper levels double,
    /// capped at 4x.
    pub base_channels: usize,
    /// Attention heads everywhere.
    pub heads: usize,
    /// Hidden dim of the pose-aware selector projections.
    pub selector_dim: usize,
    /// Dim of the global reference feature.
    pub global_dim: usize,
    /// Intermediate widths of the pose encoder (its output width is the
    /// latent channel count).
    pub pose_channels: [usize; 3],
    /// Preferred group count for group norm.
    pub groups: usize,
    /// Frames per denoiser window (N_f).
    pub window: usize,
    /// Stride between sliding windows for long videos.
    pub window_stride: usize,
    /// Timestep embedding width.
    pub t_embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 64,
            n_refs: 3,
            codec_block: 8,
            base_channels: 32,
            heads: 4,
            selector_dim: 32,
            global_dim: 64,
            pose_channels: [16, 32, 64],
            groups: 8,
            window: 8,
            window_stride: 4,
            t_embed_dim: 64,
        }
    }
}

pub const DOWN_BLOCKS: usize = 4;
pub const MID_BLOCKS: usize = 1;
pub const UP_BLOCKS: usize = 4;
pub const NUM_LEVELS: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 16 {
            return Err(Error::Config(format!(
                "resolution {} below minimum 16",
                self.resolution
            )));
        }
        if self.codec_block == 0 || self.resolution % self.codec_block != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by codec block {}",
                self.resolution, self.codec_block
            )));
        }
        if self.n_refs == 0 {
            return Err(Error::Config("n_refs must be >= 1".into()));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        for c in self.level_channels() {
            if c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "level width {} not divisible by heads {}",
                    c, self.heads
                )));
            }
        }
        if self.selector_dim == 0 || self.selector_dim % self.heads != 0 {
            return Err(Error::Config(
                "selector_dim must be a positive multiple of heads".into(),
            ));
        }
        if self.t_embed_dim % 2 != 0 {
            return Err(Error::Config("t_embed_dim must be even".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.window_stride == 0 || self.window_stride > self.window {
            return Err(Error::Config(
                "window_stride must be in 1..=window".into(),
            ));
        }
        Ok(())
    }

    /// Latent channels after space-to-depth of an RGB frame.
    pub fn latent_channels(&self) -> usize {
        3 * self.codec_block * self.codec_block
    }

    /// Latent spatial dims.
    pub fn latent_size(&self) -> usize {
        self.resolution / self.codec_block
    }

    /// Channel width per level: base, 2x, 4x, 4x (doubled up to a cap).
    pub fn level_channels(&self) -> [usize; NUM_LEVELS] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 4 * c]
    }

    /// Whether to halve resolution after down block i (and mirror on the way
    /// up). Halving stops once a side would drop below 1.
    pub fn downsample_plan(&self) -> [bool; NUM_LEVELS] {
        let mut plan = [false; NUM_LEVELS];
        let mut size = self.latent_size();
        for p in plan.iter_mut().take(NUM_LEVELS - 1) {
            if size >= 2 {
                *p = true;
                size /= 2;
            }
        }
        plan
    }

    /// Spatial size at each level.
    pub fn level_sizes(&self) -> [usize; NUM_LEVELS] {
        let plan = self.downsample_plan();
        let mut sizes = [0usize; NUM_LEVELS];
        let mut size = self.latent_size();
        for (i, s) in sizes.iter_mut().enumerate() {
            *s = size;
            if plan[i] {
                size /= 2;
            }
        }
        sizes
    }

    /// Level index used by each of the 9 U-Net blocks
    /// (4 down, 1 mid, 4 up): `[0, 1, 2, 3, 3, 3, 2, 1, 0]`.
    pub fn block_levels(&self) -> [usize; DOWN_BLOCKS + MID_BLOCKS + UP_BLOCKS] {
        [0, 1, 2, 3, 3, 3, 2, 1, 0]
    }

    /// Block indices carrying flow-enhanced temporal attention: the last
    /// down block through the first up block.
    pub fn fta_blocks(&self) -> Vec<usize> {
        ((DOWN_BLOCKS - 1)..=(DOWN_BLOCKS + MID_BLOCKS)).collect()
    }

    pub fn num_blocks(&self) -> usize {
        DOWN_BLOCKS + MID_BLOCKS + UP_BLOCKS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_plan_at_64() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.latent_channels(), 192);
        assert_eq!(cfg.latent_size(), 8);
        assert_eq!(cfg.downsample_plan(), [true, true, true, false]);
        assert_eq!(cfg.level_sizes(), [8, 4, 2, 1]);
        assert_eq!(cfg.level_channels(), [32, 64, 128, 128]);
        assert_eq!(cfg.fta_blocks(), vec![3, 4, 5]);
    }

    #[test]
    fn tiny_latents_stop_halving() {
        let cfg = ModelConfig {
            resolution: 32,
            ..Default::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.latent_size(), 4);
        assert_eq!(cfg.downsample_plan(), [true, true, false, false]);
        assert_eq!(cfg.level_sizes(), [4, 2, 1, 1]);
    }

    #[test]
    fn bad_configs_rejected() {
        let mut cfg = ModelConfig::default();
        cfg.resolution = 60;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.resolution = 8;
        assert!(cfg.validate().is_err());
    }
}
