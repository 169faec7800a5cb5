use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the four pyramid levels are merged before the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Parameter-free gated channel-pooling fusion.
    Emff,
    /// Resize, concatenate all levels and project with a learned 1×1 conv.
    Naive,
}

/// Architecture widths and input geometry of the student (or teacher).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channels of each temporal branch conv; the fused stem emits twice this.
    pub stem_channels: usize,
    pub encoder_widths: [usize; 4],
    pub encoder_depths: [usize; 4],
    pub head_hidden: usize,
    /// (H, W) used for profiling and as the nominal training size.
    pub input_size: [usize; 2],
    pub fusion_mode: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            stem_channels: 8,
            encoder_widths: [16, 32, 64, 128],
            encoder_depths: [1, 1, 2, 1],
            head_hidden: 32,
            input_size: [64, 64],
            fusion_mode: FusionMode::Emff,
        }
    }

    pub fn teacher() -> Self {
        Self {
            stem_channels: 16,
            encoder_widths: [32, 64, 128, 256],
            encoder_depths: [2, 2, 4, 2],
            head_hidden: 64,
            ..Self::tiny()
        }
    }

    /// Named width/depth presets for the backbone sweep.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::tiny();
        Ok(match name {
            "micro" => Self {
                stem_channels: 4,
                encoder_widths: [8, 16, 32, 64],
                encoder_depths: [1, 1, 1, 1],
                head_hidden: 16,
                ..base
            },
            "tiny" => base,
            "small" => Self {
                stem_channels: 8,
                encoder_widths: [16, 32, 64, 128],
                encoder_depths: [2, 2, 4, 2],
                ..base
            },
            "wide" => Self {
                stem_channels: 12,
                encoder_widths: [24, 48, 96, 192],
                encoder_depths: [1, 1, 2, 1],
                head_hidden: 48,
                ..base
            },
            "teacher" => Self::teacher(),
            other => {
                return Err(Error::Config(format!(
                    "unknown model preset `{other}` (micro, tiny, small, wide, teacher)"
                )))
            }
        })
    }

    pub const PRESETS: [&'static str; 5] = ["micro", "tiny", "small", "wide", "teacher"];

    pub fn with_fusion(mut self, mode: FusionMode) -> Self {
        self.fusion_mode = mode;
        self
    }

    /// Channels of the stem output F.
    pub fn stem_out(&self) -> usize {
        2 * self.stem_channels
    }

    /// Channels of the fused representation: C_1 + C_4.
    pub fn fused_channels(&self) -> usize {
        self.encoder_widths[0] + self.encoder_widths[3]
    }

    pub fn validate(&self) -> Result<()> {
        let [c1, c2, c3, c4] = self.encoder_widths;
        if self.stem_channels == 0 || self.head_hidden == 0 {
            return Err(Error::Config("stem_channels and head_hidden must be >= 1".into()));
        }
        if !(c1 >= 1 && c2 >= c1 && c3 >= c2 && c4 >= c3) {
            return Err(Error::Config(format!(
                "encoder widths must be non-decreasing and >= 1, got {:?}",
                self.encoder_widths
            )));
        }
        if c4 % c3 != 0 || c3 % c2 != 0 || c2 % c1 != 0 {
            return Err(Error::Config(format!(
                "each encoder width must divide the next (channel pooling), got {:?}",
                self.encoder_widths
            )));
        }
        check_input_size(self.input_size[0], self.input_size[1])
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "input size {h}x{w} must be a positive multiple of 32"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ModelConfig::PRESETS {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("huge").is_err());
    }

    #[test]
    fn invalid_widths_and_sizes_are_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.encoder_widths = [16, 24, 64, 128];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.encoder_widths = [32, 16, 64, 128];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::tiny();
        cfg.input_size = [48, 64];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
