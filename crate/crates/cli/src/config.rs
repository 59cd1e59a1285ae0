//! Run configuration schema: JSON with unknown keys rejected.

use std::path::PathBuf;

use patchlab_core::error::{Error, Result};
use patchlab_core::prompts::{self, Vocab, AN_OBJECTS, A_OBJECTS, DEFAULT_NAMES};
use patchlab_core::{Metric, NodeFamily, PromptPairDistribution};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Path to the model manifest JSON.
    pub model: PathBuf,
    pub prompts: PromptSource,
    pub node_family: FamilyName,
    #[serde(default)]
    pub metric: Metric,
    pub methods: Vec<MethodSpec>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_recall_target")]
    pub recall_target: f64,
    /// Significance level for the subsampling false-negative bound.
    #[serde(default = "default_alpha")]
    pub diagnostic_alpha: f64,
    pub output_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_recall_target() -> f64 {
    1.0
}

fn default_alpha() -> f64 {
    0.05
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("methods list must be nonempty".to_string()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds list must be nonempty".to_string()));
        }
        if !(self.recall_target > 0.0 && self.recall_target <= 1.0) {
            return Err(Error::InvalidConfig("recall_target must be in (0, 1]".to_string()));
        }
        if !(self.diagnostic_alpha > 0.0 && self.diagnostic_alpha < 1.0) {
            return Err(Error::InvalidConfig("diagnostic_alpha must be in (0, 1)".to_string()));
        }
        self.prompts.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Attention,
    Neurons,
}

impl From<FamilyName> for NodeFamily {
    fn from(f: FamilyName) -> NodeFamily {
        match f {
            FamilyName::Attention => NodeFamily::AttentionNodes,
            FamilyName::Neurons => NodeFamily::NeuronNodes,
        }
    }
}

/// Either a prompt-pair JSON file or a named builtin generator.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSource {
    #[serde(default)]
    pub file: Option<PathBuf>,
    #[serde(default)]
    pub generator: Option<String>,
    /// Seed for the random generator.
    #[serde(default)]
    pub seed: u64,
    /// Prompt length for the random generator.
    #[serde(default = "default_rand_len")]
    pub len: usize,
}

fn default_rand_len() -> usize {
    12
}

pub const GENERATOR_NAMES: [&str; 5] = ["ioi", "a-an", "city-pp", "ioi-pp", "rand-pp"];

impl PromptSource {
    pub fn validate(&self) -> Result<()> {
        match (&self.file, &self.generator) {
            (Some(_), Some(_)) | (None, None) => Err(Error::InvalidConfig(
                "prompts must name exactly one of `file` or `generator`".to_string(),
            )),
            (None, Some(g)) if !GENERATOR_NAMES.contains(&g.as_str()) => Err(
                Error::InvalidConfig(format!("unknown generator {g:?}; expected one of {GENERATOR_NAMES:?}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn load(&self) -> Result<PromptPairDistribution> {
        self.validate()?;
        if let Some(path) = &self.file {
            return PromptPairDistribution::from_json(&std::fs::read_to_string(path)?);
        }
        generate(self.generator.as_deref().unwrap(), self.seed, self.len)
    }
}

pub fn generate(name: &str, seed: u64, len: usize) -> Result<PromptPairDistribution> {
    let vocab = Vocab::builtin();
    match name {
        "ioi" => prompts::generate_ioi(&vocab, &DEFAULT_NAMES),
        "a-an" => prompts::generate_a_an(&vocab, &A_OBJECTS, &AN_OBJECTS),
        "city-pp" => prompts::city_pp(&vocab),
        "ioi-pp" => prompts::ioi_pp(&vocab),
        "rand-pp" => prompts::rand_pp(&vocab, len, seed),
        other => Err(Error::InvalidConfig(format!("unknown generator {other:?}"))),
    }
}

/// One estimator invocation with its hyperparameters.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Atp,
    AtpQkFix,
    AtpGradDrop,
    AtpStar,
    Subsampling {
        p: f64,
        samples: usize,
    },
    Blocks {
        block_size: usize,
        budget: u64,
    },
    Hierarchical {
        #[serde(default = "default_branching")]
        branching: usize,
        #[serde(default = "default_levels")]
        levels: usize,
        budget: u64,
    },
    Iterative {
        budget: u64,
    },
}

fn default_branching() -> usize {
    3
}

fn default_levels() -> usize {
    4
}

impl MethodSpec {
    /// Display name used in CSV rows.
    pub fn label(&self) -> &'static str {
        match self {
            MethodSpec::Atp => "atp",
            MethodSpec::AtpQkFix => "atp+qkfix",
            MethodSpec::AtpGradDrop => "atp+graddrop",
            MethodSpec::AtpStar => "atp*",
            MethodSpec::Subsampling { .. } => "subsampling",
            MethodSpec::Blocks { .. } => "blocks",
            MethodSpec::Hierarchical { .. } => "hierarchical",
            MethodSpec::Iterative { .. } => "iterative",
        }
    }

    /// Filesystem-safe identifier.
    pub fn file_stem(&self) -> &'static str {
        match self {
            MethodSpec::Atp => "atp",
            MethodSpec::AtpQkFix => "atp_qkfix",
            MethodSpec::AtpGradDrop => "atp_graddrop",
            MethodSpec::AtpStar => "atp_star",
            MethodSpec::Subsampling { .. } => "subsampling",
            MethodSpec::Blocks { .. } => "blocks",
            MethodSpec::Hierarchical { .. } => "hierarchical",
            MethodSpec::Iterative { .. } => "iterative",
        }
    }

}
