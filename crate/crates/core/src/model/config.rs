use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    CrossAttn,
    Add,
    Concat,
}

impl std::str::FromStr for Integration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "crossattn" | "ca" => Ok(Integration::CrossAttn),
            "add" => Ok(Integration::Add),
            "concat" => Ok(Integration::Concat),
            _ => Err(Error::Config(format!("unknown integration mode {s:?}"))),
        }
    }
}

impl std::fmt::Display for Integration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Integration::CrossAttn => "cross_attn",
            Integration::Add => "add",
            Integration::Concat => "concat",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    /// Number of stride-2 encoder stages; total stride is `2^stages`.
    pub stages: usize,
    pub d: usize,
    pub heads: usize,
    /// Pooling grid side `s`.
    pub s: usize,
    pub delta: usize,
    pub k: usize,
    pub categories: usize,
    /// Anchors per feature cell; a perfect square.
    pub anchors: usize,
    pub theta_det: f32,
    pub residual_injection: bool,
    /// Exclude absent (off-slide) context tokens from attention.
    pub mask_absent: bool,
    pub integration: Integration,
    /// Pixels per unit of regression output.
    pub offset_scale: f32,
    pub d_m: usize,
    pub phi_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_h: 64,
            patch_w: 64,
            stages: 4,
            d: 32,
            heads: 4,
            s: 4,
            delta: 1,
            k: 3,
            categories: 3,
            anchors: 1,
            theta_det: 0.5,
            residual_injection: true,
            mask_absent: true,
            integration: Integration::CrossAttn,
            offset_scale: 8.0,
            d_m: 16,
            phi_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// 96-pixel windows at stride 8, giving 12x12 feature maps and `s = 6`.
    pub fn wide_preset() -> Self {
        ModelConfig {
            patch_h: 96,
            patch_w: 96,
            stages: 3,
            s: 6,
            ..Default::default()
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.stages
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        (self.patch_h / self.stride(), self.patch_w / self.stride())
    }

    pub fn blocks(&self) -> usize {
        (2 * self.delta + 1).pow(2)
    }

    pub fn anchor_side(&self) -> usize {
        (self.anchors as f64).sqrt().round() as usize
    }

    pub fn proposals(&self) -> usize {
        let (h, w) = self.feature_hw();
        h * w * self.anchors
    }

    /// Encoder widths `3 -> d/4 -> d/2 -> d -> d ...`.
    pub fn encoder_channels(&self) -> Vec<usize> {
        let mut ch = vec![3];
        for i in 0..self.stages {
            ch.push(match i {
                0 => self.d / 4,
                1 => self.d / 2,
                _ => self.d,
            });
        }
        ch
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages == 0 || self.patch_h % self.stride() != 0 || self.patch_w % self.stride() != 0 {
            return bad(format!(
                "window {}x{} not divisible by stride {}",
                self.patch_h,
                self.patch_w,
                self.stride()
            ));
        }
        let (h, w) = self.feature_hw();
        if self.s == 0 || self.s > h.min(w) {
            return bad(format!("pooling grid s={} exceeds feature map {h}x{w}", self.s));
        }
        if self.d < 4 || self.d % 4 != 0 {
            return bad(format!("channel width d={} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("{} heads do not divide d={}", self.heads, self.d));
        }
        if self.k > self.blocks() {
            return bad(format!("k={} exceeds {} context entries", self.k, self.blocks()));
        }
        let a = self.anchor_side();
        if self.anchors == 0 || a * a != self.anchors {
            return bad(format!("anchors per cell K={} must be a perfect square", self.anchors));
        }
        if self.categories < 1 {
            return bad("at least one category".into());
        }
        if !(0.0..=1.0).contains(&self.theta_det) {
            return bad(format!("theta_det {} outside [0, 1]", self.theta_det));
        }
        if self.d_m == 0 || self.phi_hidden == 0 {
            return bad("refinement head widths must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stride(), 16);
        assert_eq!(c.feature_hw(), (4, 4));
        assert_eq!(c.encoder_channels(), vec![3, 8, 16, 32, 32]);
        assert_eq!(c.blocks(), 9);
    }

    #[test]
    fn wide_preset_supports_six_cell_pooling() {
        let c = ModelConfig::wide_preset();
        c.validate().unwrap();
        assert_eq!(c.feature_hw(), (12, 12));
        assert_eq!(c.s, 6);
    }

    #[test]
    fn oversized_pooling_grid_is_a_config_error() {
        let c = ModelConfig { s: 5, ..Default::default() };
        assert!(c.validate().unwrap_err().is_config());
    }

    #[test]
    fn integration_names_parse() {
        for m in [Integration::CrossAttn, Integration::Add, Integration::Concat] {
            assert_eq!(m.to_string().parse::<Integration>().unwrap(), m);
        }
    }
}
