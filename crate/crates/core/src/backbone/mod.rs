//! Encoder-decoder segmentation backbone with an ASPP + transformer
//! bottleneck and dual output heads (class logits and per-pixel
//! log-variance).

pub mod attention;
pub mod layers;
mod net;
pub mod params;

pub use net::{Backbone, ForwardMode, RawOutput, Trace};
pub use params::{Init, ParamEntry, ParamId, ParamLayout, ParamStore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Spatial input size is part of the
/// configuration because the bottleneck's positional embedding is sized by
/// the token count, which fixes the parameter count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Number of input modalities (channels).
    pub in_channels: usize,
    /// Number of segmentation classes C.
    pub num_classes: usize,
    /// Channel width of the first encoder stage; stage l has width `base_width << l`.
    pub base_width: usize,
    /// Number of encoder stages; stage l runs at resolution (H, W) / 2^l.
    pub depth: usize,
    /// Dilation rates of the parallel ASPP branches at the deepest stage.
    pub dilation_rates: Vec<usize>,
    /// Token embedding width d of the bottleneck (also the ASPP output width).
    pub token_dim: usize,
    /// Attention head count; must divide `token_dim`.
    pub heads: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    /// Dropout probability for stochastic passes (bottleneck + decoder only).
    pub dropout_rate: f64,
    /// Expected input spatial size (H, W).
    pub input_hw: (usize, usize),
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            num_classes: 4,
            base_width: 8,
            depth: 3,
            dilation_rates: vec![1, 2, 4, 8],
            token_dim: 32,
            heads: 4,
            ff_mult: 2,
            dropout_rate: 0.2,
            input_hw: (64, 64),
        }
    }
}

impl BackboneConfig {
    /// Spatial size of the deepest encoder stage.
    pub fn bottleneck_hw(&self) -> (usize, usize) {
        let s = 1usize << (self.depth - 1);
        (self.input_hw.0 / s, self.input_hw.1 / s)
    }

    /// Token count N at the bottleneck.
    pub fn token_count(&self) -> usize {
        let (h, w) = self.bottleneck_hw();
        h * w
    }

    /// Encoder channel width at stage `l`.
    pub fn stage_width(&self, l: usize) -> usize {
        self.base_width << l
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidConfig(format!(
                "depth {} below minimum 2",
                self.depth
            )));
        }
        if self.in_channels == 0 || self.base_width == 0 || self.num_classes < 2 {
            return Err(Error::InvalidConfig(
                "in_channels/base_width must be positive and num_classes >= 2".into(),
            ));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.iter().any(|&r| r == 0) {
            return Err(Error::InvalidConfig(
                "dilation_rates must be non-empty and strictly positive".into(),
            ));
        }
        if self.token_dim == 0 || self.heads == 0 || self.token_dim % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.ff_mult == 0 {
            return Err(Error::InvalidConfig("ff_mult must be positive".into()));
        }
        if !(0.0..=0.9).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate {} outside [0, 0.9]",
                self.dropout_rate
            )));
        }
        let (h, w) = self.input_hw;
        if h < 8 || w < 8 {
            return Err(Error::InvalidConfig(format!(
                "input size {h}x{w} below minimum 8x8"
            )));
        }
        let div = 1usize << (self.depth - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Indivisible {
                h,
                w,
                divisor: div,
                pad_h: h.div_ceil(div) * div,
                pad_w: w.div_ceil(div) * div,
            });
        }
        let (bh, bw) = self.bottleneck_hw();
        let extent = bh.min(bw);
        for &r in &self.dilation_rates {
            if r >= extent {
                return Err(Error::DilationTooLarge { rate: r, extent });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        BackboneConfig::default().validate().unwrap();
    }

    #[test]
    fn indivisible_input_reports_padding_hint() {
        let cfg = BackboneConfig {
            depth: 4,
            input_hw: (60, 64),
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Indivisible { pad_h, pad_w, .. }) => {
                assert_eq!((pad_h, pad_w), (64, 64));
            }
            other => panic!("expected Indivisible, got {other:?}"),
        }
    }

    #[test]
    fn oversized_dilation_rejected() {
        let cfg = BackboneConfig {
            depth: 4,
            dilation_rates: vec![1, 8],
            ..Default::default()
        };
        assert!(matches!(
            cfg.validate(),
            Err(Error::DilationTooLarge { rate: 8, extent: 8 })
        ));
    }

    #[test]
    fn head_divisibility_enforced() {
        let cfg = BackboneConfig {
            token_dim: 30,
            heads: 4,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
