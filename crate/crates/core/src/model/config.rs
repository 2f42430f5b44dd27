//! Architectural hyperparameters for the hourglass stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sequencer::VocabSpec;

/// Three-level hourglass: depth-d0 outer stage at token resolution, then
/// two 3x shortenings into depth-d1 and depth-d2 inner stages. Trailing
/// zero depths drop the corresponding levels entirely, so (d,0,0) is a
/// plain transformer and (0,0,0) is embedding + head only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HourglassConfig {
    pub quant_level: u32,
    pub depths: (usize, usize, usize),
    pub channels: usize,
    pub head_channels: usize,
    pub ffn_hidden: usize,
    /// Attention window at token level, in tokens; inner levels use
    /// window/3 and window/9 entries.
    pub window: usize,
    pub rope_theta: f64,
    /// Every interval-th block of each stage becomes a cross-attention
    /// block when conditioning is configured; 0 disables replacement.
    pub cross_attention_interval: usize,
    pub cond: Option<CondConfig>,
}

/// Conditioning encoder: K learned latents cross-attend to lifted point
/// features for `enc_depth` blocks; face count and quad ratio pass through
/// their own 2-layer MLPs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CondConfig {
    pub latents: usize,
    pub enc_depth: usize,
}

/// Raw per-point features: position and normal.
pub const POINT_DIM: usize = 6;

pub const SHORTEN_FACTOR: usize = 3;

impl HourglassConfig {
    /// Minutes-scale defaults at Q=128.
    pub fn toy(quant_level: u32) -> Self {
        HourglassConfig {
            quant_level,
            depths: (4, 8, 12),
            channels: 128,
            head_channels: 32,
            ffn_hidden: 256,
            window: 1152,
            rope_theta: 1e6,
            cross_attention_interval: 4,
            cond: None,
        }
    }

    pub fn vocab(&self) -> VocabSpec {
        VocabSpec::new(self.quant_level)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().vocab_size()
    }

    /// Stage depths with trailing zero levels trimmed.
    pub fn levels(&self) -> Vec<usize> {
        let mut d = vec![self.depths.0, self.depths.1, self.depths.2];
        while d.last() == Some(&0) {
            d.pop();
        }
        d
    }

    pub fn heads(&self) -> usize {
        self.channels / self.head_channels
    }

    /// Window in entries at level `l` for a token-level window `w`.
    pub fn window_entries(w: usize, level: usize) -> usize {
        (w / SHORTEN_FACTOR.pow(level as u32)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.quant_level < 2 {
            return Err(Error::Config("quant_level must be >= 2".into()));
        }
        if self.channels == 0 || self.head_channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.channels % self.head_channels != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by head_channels {}",
                self.channels, self.head_channels
            )));
        }
        if self.head_channels % 2 != 0 {
            return Err(Error::Config(
                "head_channels must be even for rotary pairs".into(),
            ));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::Config("ffn_hidden must be positive".into()));
        }
        if self.window == 0 || self.window % 9 != 0 {
            return Err(Error::Config(format!(
                "window {} must be a positive multiple of 9",
                self.window
            )));
        }
        if !(self.rope_theta > 1.0) {
            return Err(Error::Config("rope_theta must exceed 1".into()));
        }
        if let Some(cond) = &self.cond {
            if cond.latents == 0 || cond.enc_depth == 0 {
                return Err(Error::Config(
                    "conditioning needs at least one latent and one block".into(),
                ));
            }
        }
        Ok(())
    }

    /// Is stack position `i` (0-based) within a stage a cross-attention
    /// block? Only when conditioning is present.
    pub fn is_cross_block(&self, i: usize) -> bool {
        self.cond.is_some()
            && self.cross_attention_interval > 0
            && (i + 1) % self.cross_attention_interval == 0
    }

    /// Blocks of level `l` that run before descending (the rest run after
    /// the upsampled stream is folded back). The innermost level keeps all
    /// of its blocks on the way down.
    pub fn pre_post_split(&self, level: usize) -> (usize, usize) {
        let levels = self.levels();
        let d = levels[level];
        if level + 1 == levels.len() {
            (d, 0)
        } else {
            (d.div_ceil(2), d / 2)
        }
    }
}
