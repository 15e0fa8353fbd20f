use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Four residual stages of 16/32/64/128 channels.
    Tiny,
    /// torchvision ResNet-50 layout with a dilated last stage.
    ResNet50,
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Backbone::Tiny),
            "resnet50" => Ok(Backbone::ResNet50),
            _ => Err(Error::Config(format!("unknown backbone {s:?}"))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Tiny => "tiny",
            Backbone::ResNet50 => "resnet50",
        })
    }
}

impl Backbone {
    /// Channels of the stride-4 feature map.
    pub fn low_level_channels(self) -> usize {
        match self {
            Backbone::Tiny => 32,
            Backbone::ResNet50 => 256,
        }
    }

    /// Channels of the stride-16 feature map.
    pub fn high_level_channels(self) -> usize {
        match self {
            Backbone::Tiny => 128,
            Backbone::ResNet50 => 2048,
        }
    }
}

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub backbone: Backbone,
    /// `(H, W)` of network inputs.
    pub input_size: (usize, usize),
    pub low_level_stride: usize,
    pub high_level_stride: usize,
    /// Width of the ASPP/MASPP output.
    pub maspp_channels: usize,
    /// Width of the skip-fusion output.
    pub decoder_channels: usize,
    /// Width of the reduced low-level branch concatenated with the upsampled
    /// high-level feature.
    pub low_level_reduced: usize,
    pub projection_dim: usize,
    pub se_reduction: usize,
    pub aspp_rates: [usize; 3],
    pub use_maspp: bool,
    pub use_ca: bool,
    pub use_cl_branch: bool,
    /// EMA coefficient of the momentum encoder.
    pub momentum: f64,
}

impl NetworkSpec {
    pub fn resnet50() -> Self {
        NetworkSpec {
            backbone: Backbone::ResNet50,
            input_size: (384, 384),
            low_level_stride: 4,
            high_level_stride: 16,
            maspp_channels: 256,
            decoder_channels: 256,
            low_level_reduced: 48,
            projection_dim: 2048,
            se_reduction: 16,
            aspp_rates: [6, 12, 18],
            use_maspp: true,
            use_ca: true,
            use_cl_branch: true,
            momentum: 0.999,
        }
    }

    pub fn tiny() -> Self {
        NetworkSpec {
            backbone: Backbone::Tiny,
            maspp_channels: 64,
            decoder_channels: 64,
            low_level_reduced: 16,
            projection_dim: 128,
            ..Self::resnet50()
        }
    }

    pub fn preset(backbone: Backbone) -> Self {
        match backbone {
            Backbone::Tiny => Self::tiny(),
            Backbone::ResNet50 => Self::resnet50(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.low_level_stride != 4 || self.high_level_stride != 16 {
            return bad(format!(
                "feature strides are fixed at 4 and 16, got {} and {}",
                self.low_level_stride, self.high_level_stride
            ));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % self.high_level_stride != 0 || w % self.high_level_stride != 0 {
            return bad(format!(
                "input size {h}x{w} must be a positive multiple of {}",
                self.high_level_stride
            ));
        }
        if self.se_reduction == 0 || !self.maspp_channels.is_multiple_of(self.se_reduction) {
            return bad(format!(
                "maspp_channels {} is not divisible by the SE reduction {}",
                self.maspp_channels, self.se_reduction
            ));
        }
        for (name, v) in [
            ("maspp_channels", self.maspp_channels),
            ("decoder_channels", self.decoder_channels),
            ("low_level_reduced", self.low_level_reduced),
            ("projection_dim", self.projection_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1], got {}", self.momentum));
        }
        Ok(())
    }

    pub fn low_level_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.low_level_stride,
            self.input_size.1 / self.low_level_stride,
        )
    }

    pub fn high_level_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.high_level_stride,
            self.input_size.1 / self.high_level_stride,
        )
    }
}
