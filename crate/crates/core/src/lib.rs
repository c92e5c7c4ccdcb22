//! Query-point temporal action detection.
//!
//! A set-prediction decoder refines learnable query points over stacked
//! layers. Each layer mixes query vectors with state-space (Mamba) blocks and
//! multi-head self-attention, samples features at deformable sub-points, and
//! mixes them per instance with dynamically generated weights. The crate also
//! covers sliding-window data handling, bipartite-matching training and the
//! precision/recall/F1 evaluator.

pub mod decoder;
pub mod error;
pub mod evaluator;
pub mod infer;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod seqblocks;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{ParamStore, Tape, Tensor, Var};
