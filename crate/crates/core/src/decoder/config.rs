use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqblocks::MambaMhsaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    #[serde(rename = "L", default = "defaults::layers")]
    pub layers: usize,
    #[serde(rename = "N_q", default = "defaults::num_queries")]
    pub num_queries: usize,
    /// Points per query.
    #[serde(rename = "N_s", default = "defaults::num_points")]
    pub num_points: usize,
    #[serde(rename = "D", default = "defaults::d_model")]
    pub d_model: usize,
    /// Channel-mix bottleneck; `D / 4` when absent.
    #[serde(rename = "D_prime", default, skip_serializing_if = "Option::is_none")]
    pub d_mix: Option<usize>,
    #[serde(rename = "D_in", default = "defaults::d_in")]
    pub d_in: usize,
    #[serde(default = "defaults::num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub mamba: MambaMhsaConfig,
    /// Half-width of the initial point spread as a fraction of `T'`.
    #[serde(default = "defaults::init_spread")]
    pub init_spread: f64,
    #[serde(default = "defaults::score_thresh")]
    pub score_thresh: f64,
}

mod defaults {
    pub fn layers() -> usize {
        4
    }
    pub fn num_queries() -> usize {
        48
    }
    pub fn num_points() -> usize {
        30
    }
    pub fn d_model() -> usize {
        256
    }
    pub fn d_in() -> usize {
        1024
    }
    pub fn num_classes() -> usize {
        17
    }
    pub fn init_spread() -> f64 {
        0.05
    }
    pub fn score_thresh() -> f64 {
        0.1
    }
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: defaults::layers(),
            num_queries: defaults::num_queries(),
            num_points: defaults::num_points(),
            d_model: defaults::d_model(),
            d_mix: None,
            d_in: defaults::d_in(),
            num_classes: defaults::num_classes(),
            mamba: MambaMhsaConfig::default(),
            init_spread: defaults::init_spread(),
            score_thresh: defaults::score_thresh(),
        }
    }
}

impl DecoderConfig {
    /// Small stack used by the finite-difference gradient suite:
    /// `L = 2, N_q = 4, N_s = 6, D = 16, M = 1, K = 3`.
    pub fn tiny() -> Self {
        Self {
            layers: 2,
            num_queries: 4,
            num_points: 6,
            d_model: 16,
            d_mix: None,
            d_in: 5,
            num_classes: 3,
            mamba: MambaMhsaConfig { blocks: 1, heads: 2, d_state: 4, selective: false },
            ..Self::default()
        }
    }

    pub fn d_mix(&self) -> usize {
        self.d_mix.unwrap_or((self.d_model / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let at_least = |field: &str, v: usize, min: usize| {
            if v < min {
                Err(Error::config(format!("decoder.{field}"), format!("must be at least {min}, got {v}")))
            } else {
                Ok(())
            }
        };
        at_least("L", self.layers, 1)?;
        at_least("N_q", self.num_queries, 1)?;
        at_least("N_s", self.num_points, 2)?;
        at_least("D", self.d_model, 1)?;
        at_least("D_prime", self.d_mix(), 1)?;
        at_least("D_in", self.d_in, 1)?;
        at_least("num_classes", self.num_classes, 1)?;
        if !(0.0..=0.5).contains(&self.init_spread) {
            return Err(Error::config("decoder.init_spread", format!("must lie in [0, 0.5], got {}", self.init_spread)));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return Err(Error::config("decoder.score_thresh", format!("must lie in [0, 1], got {}", self.score_thresh)));
        }
        self.mamba.validate(self.d_model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_key_names() {
        let c: DecoderConfig = serde_json::from_str(r#"{"L": 2, "N_s": 25, "mamba": {"M": 3}}"#).unwrap();
        assert_eq!(c.layers, 2);
        assert_eq!(c.num_points, 25);
        assert_eq!(c.num_queries, 48);
        assert_eq!(c.d_mix(), 64);
        assert_eq!(c.mamba.blocks, 3);
        c.validate().unwrap();
        assert!(serde_json::from_str::<DecoderConfig>(r#"{"layers": 2}"#).is_err());
    }

    #[test]
    fn invalid_fields_named() {
        let c = DecoderConfig { num_points: 1, ..DecoderConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("N_s"));
        let c = DecoderConfig { layers: 0, ..DecoderConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("decoder.L"));
        let c = DecoderConfig { d_model: 20, ..DecoderConfig::default() };
        assert!(c.validate().unwrap_err().to_string().contains("heads"));
    }
}
