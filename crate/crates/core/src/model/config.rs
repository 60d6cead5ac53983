use serde::{Deserialize, Serialize};

use super::graph::HPad;
use crate::error::{Error, Result};

/// One backbone stage: output channels and total spatial stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwgConfig {
    /// Number of `[window, global, shifted window, global]` groups.
    pub repeats: usize,
    pub window_size: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Centered,
    Left,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Pano,
    Pp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Panorama input `[height, width]`, width = 2 * height.
    pub pano_input: [usize; 2],
    /// Perspective canvas width after cropping to the informative span.
    pub pp_input_width: usize,
    pub backbone: Vec<StageSpec>,
    pub layers_per_stage: usize,
    /// Height strides (and kernel heights) of the three compression convs.
    pub compress_strides: [usize; 3],
    pub merged_channels: usize,
    pub pano_feature_width: usize,
    pub pp_feature_width: usize,
    pub swg: SwgConfig,
    /// Horizontal padding of the panorama branch inside the backbone. The
    /// perspective branch always zero-pads.
    pub pano_backbone_hpad: HPad,
    pub pp_placement: Placement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the tests and the CLI defaults.
    pub fn toy() -> Self {
        Self {
            pano_input: [64, 128],
            pp_input_width: 32,
            backbone: vec![
                StageSpec {
                    channels: 16,
                    stride: 4,
                },
                StageSpec {
                    channels: 32,
                    stride: 2,
                },
                StageSpec {
                    channels: 64,
                    stride: 2,
                },
                StageSpec {
                    channels: 128,
                    stride: 2,
                },
            ],
            layers_per_stage: 2,
            compress_strides: [2, 1, 1],
            merged_channels: 64,
            pano_feature_width: 32,
            pp_feature_width: 8,
            swg: SwgConfig {
                repeats: 2,
                window_size: 8,
                heads: 4,
                head_dim: 16,
                ffn_hidden: 128,
            },
            pano_backbone_hpad: HPad::Circular,
            pp_placement: Placement::Centered,
        }
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            pano_input: [32, 64],
            pp_input_width: 16,
            backbone: vec![
                StageSpec { channels: 4, stride: 4 },
                StageSpec { channels: 8, stride: 2 },
                StageSpec { channels: 8, stride: 2 },
                StageSpec { channels: 8, stride: 1 },
            ],
            merged_channels: 16,
            pano_feature_width: 16,
            pp_feature_width: 4,
            swg: SwgConfig {
                repeats: 2,
                window_size: 8,
                heads: 2,
                head_dim: 8,
                ffn_hidden: 16,
            },
            ..Self::toy()
        }
    }

    /// Full-resolution shapes: 512x1024 panoramas, 256-column perspective
    /// crops, 1024 merged channels, 256/64 feature columns.
    pub fn full_scale() -> Self {
        Self {
            pano_input: [512, 1024],
            pp_input_width: 256,
            backbone: vec![
                StageSpec {
                    channels: 256,
                    stride: 4,
                },
                StageSpec {
                    channels: 512,
                    stride: 2,
                },
                StageSpec {
                    channels: 1024,
                    stride: 2,
                },
                StageSpec {
                    channels: 2048,
                    stride: 2,
                },
            ],
            layers_per_stage: 2,
            compress_strides: [4, 2, 2],
            merged_channels: 1024,
            pano_feature_width: 256,
            pp_feature_width: 64,
            swg: SwgConfig {
                repeats: 2,
                window_size: 16,
                heads: 8,
                head_dim: 128,
                ffn_hidden: 2048,
            },
            pano_backbone_hpad: HPad::Circular,
            pp_placement: Placement::Centered,
        }
    }

    pub fn input_width(&self, branch: Branch) -> usize {
        match branch {
            Branch::Pano => self.pano_input[1],
            Branch::Pp => self.pp_input_width,
        }
    }

    pub fn feature_width(&self, branch: Branch) -> usize {
        match branch {
            Branch::Pano => self.pano_feature_width,
            Branch::Pp => self.pp_feature_width,
        }
    }

    pub fn total_stride(&self) -> usize {
        self.backbone.iter().map(|s| s.stride).product()
    }

    /// Cumulative stride after each stage.
    pub fn scale_strides(&self) -> Vec<usize> {
        self.backbone
            .iter()
            .scan(1, |acc, s| {
                *acc *= s.stride;
                Some(*acc)
            })
            .collect()
    }

    /// Output channels of the last compression conv for scale `s`.
    pub fn compress_out_channels(&self, s: usize) -> usize {
        let h = self.pano_input[0] / self.scale_strides()[s];
        let hf = h / self.compress_strides.iter().product::<usize>();
        self.merged_channels / self.backbone.len() / hf
    }

    /// `[c_in, c_mid, c_mid, c_out]` of the compression convs at scale `s`.
    pub fn compress_channels(&self, s: usize) -> [usize; 4] {
        let cin = self.backbone[s].channels;
        let cout = self.compress_out_channels(s);
        let mid = (cin / 2).max(cout);
        [cin, mid, mid, cout]
    }

    /// Column where the perspective features start when padded to full width.
    pub fn pp_offset(&self) -> usize {
        match self.pp_placement {
            Placement::Centered => (self.pano_feature_width - self.pp_feature_width) / 2,
            Placement::Left => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let [h, w] = self.pano_input;
        if w != 2 * h || h == 0 {
            return bad(format!("panorama input must be H x 2H, got {h}x{w}"));
        }
        if self.backbone.len() != 4 {
            return bad("backbone must have exactly 4 stages".into());
        }
        if self.layers_per_stage == 0 {
            return bad("each stage needs at least one conv layer".into());
        }
        if self.backbone.iter().any(|s| s.channels == 0 || s.stride == 0) {
            return bad("stage channels and strides must be positive".into());
        }
        let total = self.total_stride();
        for (name, width) in [("panorama", w), ("perspective", self.pp_input_width)] {
            if width == 0 || width % total != 0 {
                return bad(format!("{name} input width {width} not divisible by {total}"));
            }
        }
        if h % total != 0 {
            return bad(format!("input height {h} not divisible by {total}"));
        }
        let cs: usize = self.compress_strides.iter().product();
        if self.compress_strides.contains(&0) {
            return bad("compression strides must be positive".into());
        }
        let n = self.backbone.len();
        if !self.merged_channels.is_multiple_of(n) {
            return bad(format!("merged channels not divisible by {n} scales"));
        }
        for (s, stride) in self.scale_strides().into_iter().enumerate() {
            let hs = h / stride;
            if hs % cs != 0 {
                return bad(format!(
                    "scale {s} height {hs} not divisible by compression factor {cs}"
                ));
            }
            if !(self.merged_channels / n).is_multiple_of(hs / cs) {
                return bad(format!(
                    "scale {s}: merged channels do not split over height {}",
                    hs / cs
                ));
            }
        }
        if self.pano_feature_width * self.pp_input_width != self.pp_feature_width * w {
            return bad("feature width ratio must equal input width ratio".into());
        }
        if self.pp_feature_width > self.pano_feature_width {
            return bad("perspective features wider than panorama features".into());
        }
        let swg = &self.swg;
        if swg.heads * swg.head_dim != self.merged_channels {
            return bad("heads * head_dim must equal merged channels".into());
        }
        if swg.window_size == 0 || !self.pano_feature_width.is_multiple_of(swg.window_size) {
            return bad(format!(
                "window size {} does not divide {} columns",
                swg.window_size, self.pano_feature_width
            ));
        }
        if !swg.window_size.is_multiple_of(2) {
            return bad("window size must be even for the half-window shift".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn full_branch_shapes() {
        let c = ModelConfig::full_scale();
        // four scales contribute 256 channels each after flattening height
        let per_scale: Vec<usize> = (0..4)
            .map(|s| {
                let hs = 512 / c.scale_strides()[s];
                c.compress_out_channels(s) * hs / 16
            })
            .collect();
        assert_eq!(per_scale, vec![256; 4]);
        assert_eq!(c.pp_offset(), 96);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig::toy();
        c.swg.window_size = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.pp_input_width = 48;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.compress_strides = [4, 2, 2];
        assert!(c.validate().is_err());
    }
}
