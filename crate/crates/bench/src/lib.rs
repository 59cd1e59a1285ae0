//! Shared fixtures for the criterion benchmarks.

use patchlab_core::patching::Metric;
use patchlab_core::prompts::{self, Vocab};
use patchlab_core::{Model, ModelConfig, PatchEngine, PromptPairDistribution};

/// Two-layer toy model sized to hold every bundled prompt.
pub fn toy_model() -> Model {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 16,
        vocab_size: 64,
        max_seq: 16,
    };
    Model::from_seed(config, 7).expect("toy model config is valid")
}

pub fn toy_pair() -> PromptPairDistribution {
    prompts::ioi_pp(&Vocab::builtin()).expect("builtin pair generates")
}

pub fn toy_engine(model: &Model) -> PatchEngine<'_> {
    PatchEngine::new(model, toy_pair(), Metric::default()).expect("engine builds")
}
