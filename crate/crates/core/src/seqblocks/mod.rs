//! Query-axis sequence modelling: state-space blocks followed by multi-head
//! self-attention.

pub mod attention;
pub mod mamba;
pub mod ssm;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use attention::{Dense, Mhsa, Norm};
pub use mamba::MambaBlock;
pub use ssm::{conv_apply, discretize, kernel, scan, DiscreteSsm, SsmParams};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MambaMhsaConfig {
    /// Number of stacked Mamba blocks.
    #[serde(rename = "M", default = "defaults::blocks")]
    pub blocks: usize,
    #[serde(default = "defaults::heads")]
    pub heads: usize,
    #[serde(rename = "N_state", default = "defaults::d_state")]
    pub d_state: usize,
    /// Input-dependent step size (scan only, no convolutional form).
    #[serde(default)]
    pub selective: bool,
}

mod defaults {
    pub fn blocks() -> usize {
        2
    }
    pub fn heads() -> usize {
        8
    }
    pub fn d_state() -> usize {
        8
    }
}

impl Default for MambaMhsaConfig {
    fn default() -> Self {
        Self { blocks: 2, heads: 8, d_state: 8, selective: false }
    }
}

impl MambaMhsaConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::config("mamba.M", "at least one Mamba block is required"));
        }
        if self.d_state == 0 {
            return Err(Error::config("mamba.N_state", "must be at least 1"));
        }
        attention::check_heads(d_model, self.heads).map_err(|_| {
            Error::config("mamba.heads", format!("D = {d_model} is not divisible by heads = {}", self.heads))
        })
    }
}

/// `M` Mamba blocks followed by MHSA.
#[derive(Debug, Clone)]
pub struct MambaMhsa {
    pub blocks: Vec<MambaBlock>,
    pub mhsa: Mhsa,
}

impl MambaMhsa {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, d_model: usize, cfg: &MambaMhsaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(d_model)?;
        let blocks = (0..cfg.blocks)
            .map(|m| MambaBlock::new(store, &format!("{prefix}.mamba{m}"), d_model, cfg.d_state, cfg.selective, rng))
            .collect::<Result<_>>()?;
        let mhsa = Mhsa::new(store, &format!("{prefix}.mhsa"), d_model, cfg.heads, rng)?;
        Ok(Self { blocks, mhsa })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var) -> Result<Var> {
        let mut x = q;
        for b in &self.blocks {
            x = b.forward(tape, store, x)?;
        }
        self.mhsa.forward(tape, store, x)
    }
}
