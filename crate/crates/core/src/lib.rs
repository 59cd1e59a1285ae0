//! Causal attribution for toy decoder-only transformers.
//!
//! The crate is organized around a ground-truth intervention engine
//! ([`patching`]) over a small GPT-2-style model ([`model`]) executed on a
//! recorded tape with exact reverse-mode differentiation ([`tape`]).
//! Fast gradient-based estimators live in [`atp`], sampling and search
//! baselines in [`baselines`], false-negative diagnostics in
//! [`diagnostics`], and the cost-of-verified-recall harness in [`eval`].

pub mod atp;
pub mod baselines;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod model;
pub mod patching;
pub mod prompts;
pub mod synthetic;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, NodeFamily, NodeId, Site};
pub use patching::{InterventionOracle, Metric, MetricKind, PatchDirection, PatchEngine, PromptPair, PromptPairDistribution};
pub use tensor::Tensor;
