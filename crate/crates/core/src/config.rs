//! Encoder configuration and its defaults.

use crate::codec::CodecId;
use crate::gaussian::{equal_fractions, DEFAULT_LAMBDA_PSI, DEFAULT_LAYERS, DEFAULT_PRUNE_FRACTION};
use crate::motion::DEFAULT_TAU_MU;
use crate::quant::FlattenOrder;
use crate::rate::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Grouping {
    /// Open a group whenever mean translation exceeds `tau_mu`.
    #[default]
    Adaptive,
    /// Groups of a fixed frame count.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeConfig {
    pub layers: usize,
    /// `None` splits the keyframe into equal layers.
    pub layer_fractions: Option<Vec<f64>>,
    pub lambda_psi: f64,
    pub tau_mu: f64,
    /// Lower the SH degree of the input; `None` keeps it.
    pub sh_degree: Option<u8>,
    pub pos_bits: u8,
    /// Positions switch to 32 bits when any scene axis spans more than this.
    pub wide_position_extent: Option<f32>,
    pub codec: CodecId,
    pub prune_fraction: f64,
    pub grouping: Grouping,
    pub flatten_order: FlattenOrder,
    pub fps_num: u16,
    pub fps_den: u16,
    pub seed: u64,
    /// Fill in rate-model estimates in the encode report.
    pub estimate_rates: bool,
    pub loss: LossWeights,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS,
            layer_fractions: None,
            lambda_psi: DEFAULT_LAMBDA_PSI,
            tau_mu: DEFAULT_TAU_MU,
            sh_degree: None,
            pos_bits: 16,
            wide_position_extent: None,
            codec: CodecId::Reference,
            prune_fraction: DEFAULT_PRUNE_FRACTION,
            grouping: Grouping::Adaptive,
            flatten_order: FlattenOrder::Significance,
            fps_num: 30,
            fps_den: 1,
            seed: 0,
            estimate_rates: true,
            loss: LossWeights::with_layers(DEFAULT_LAYERS),
        }
    }
}

impl EncodeConfig {
    pub fn fractions(&self) -> Vec<f64> {
        self.layer_fractions
            .clone()
            .unwrap_or_else(|| equal_fractions(self.layers))
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.layers == 0 || self.layers > u8::MAX as usize {
            return Err(format!("layers {} outside 1..=255", self.layers));
        }
        if let Some(f) = &self.layer_fractions {
            if f.len() != self.layers {
                return Err(format!("{} layer fractions for {} layers", f.len(), self.layers));
            }
            if f.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err("layer fractions must be non-negative and sum to 1".into());
            }
        }
        if !(self.lambda_psi.is_finite() && self.lambda_psi >= 0.0) {
            return Err(format!("lambda-psi {} must be finite and >= 0", self.lambda_psi));
        }
        if !(self.tau_mu.is_finite() && self.tau_mu > 0.0) {
            return Err(format!("tau-mu {} must be positive", self.tau_mu));
        }
        if matches!(self.sh_degree, Some(d) if d > 3) {
            return Err("sh degree above 3".into());
        }
        if self.pos_bits != 16 && self.pos_bits != 32 {
            return Err(format!("position bits {} must be 16 or 32", self.pos_bits));
        }
        if matches!(self.wide_position_extent, Some(e) if !(e.is_finite() && e > 0.0)) {
            return Err("wide position extent must be positive".into());
        }
        if self.codec == CodecId::ExternalAvc {
            return Err("codec 2 (external AVC) has no built-in encoder".into());
        }
        if !(0.0..1.0).contains(&self.prune_fraction) {
            return Err(format!("prune fraction {} outside [0, 1)", self.prune_fraction));
        }
        if self.grouping == Grouping::Fixed(0) {
            return Err("fixed group length must be at least 1".into());
        }
        if self.fps_num == 0 || self.fps_den == 0 {
            return Err("frame rate must be positive".into());
        }
        if self.loss.per_level.len() != self.layers {
            return Err("loss level weights do not match layer count".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_settings() {
        let c = EncodeConfig::default();
        assert_eq!(c.layers, 6);
        assert_eq!(c.lambda_psi, 1e5);
        assert_eq!(c.tau_mu, 0.0025);
        assert_eq!(c.prune_fraction, 0.4);
        assert_eq!(c.pos_bits, 16);
        assert_eq!(c.loss.lambda_ssim, 0.2);
        assert_eq!(c.loss.lambda_rate_key, 1e-7);
        assert_eq!(c.loss.lambda_rate_inter, 1e-4);
        assert_eq!(c.loss.lambda_reg, 1e-3);
        assert_eq!(c.loss.per_level, vec![0.5, 0.25, 0.5 / 3.0, 0.125, 0.1, 1.0]);
        assert_eq!(c.fractions(), vec![1.0 / 6.0; 6]);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_bad_settings() {
        let bad = [
            EncodeConfig { layers: 0, ..Default::default() },
            EncodeConfig { pos_bits: 8, ..Default::default() },
            EncodeConfig { tau_mu: 0.0, ..Default::default() },
            EncodeConfig { prune_fraction: 1.0, ..Default::default() },
            EncodeConfig { codec: CodecId::ExternalAvc, ..Default::default() },
            EncodeConfig { grouping: Grouping::Fixed(0), ..Default::default() },
            EncodeConfig { layer_fractions: Some(vec![0.5, 0.6, 0.0, 0.0, 0.0, 0.0]), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }
}
