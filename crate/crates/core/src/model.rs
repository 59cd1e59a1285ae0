//! Desk-scale decoder-only transformer.
//!
//! Pre-LN GPT-2-style architecture: learned positional embeddings, serial
//! attention-then-MLP blocks, tanh-approximation GELU. Every forward pass is
//! recorded on a [`Tape`](crate::tape::Tape), so the same trace serves caching,
//! patched replay, and exact backward passes.
//!
//! The node taxonomy treats the per-head query, key, value and (pre-output-
//! projection) attention output vectors, and each post-activation MLP neuron,
//! at each token position, as distinct nodes.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{RunValues, Tape, ValueId};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const MANIFEST_VERSION: &str = "PATCHLAB-MODEL-v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_layers must be >= 2, got {}",
                self.n_layers
            )));
        }
        for (name, v) in [
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::InvalidConfig(format!(
                "d_model ({}) != n_heads ({}) * d_head ({})",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }
}

/// Activation site within the model, independent of token position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Site {
    AttnQuery { layer: usize, head: usize },
    AttnKey { layer: usize, head: usize },
    AttnValue { layer: usize, head: usize },
    /// Per-head attention output z = attn @ v, before the output projection.
    AttnOut { layer: usize, head: usize },
    /// Post-activation MLP neuron.
    Neuron { layer: usize, index: usize },
}

impl Site {
    pub fn layer(&self) -> usize {
        match *self {
            Site::AttnQuery { layer, .. }
            | Site::AttnKey { layer, .. }
            | Site::AttnValue { layer, .. }
            | Site::AttnOut { layer, .. }
            | Site::Neuron { layer, .. } => layer,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub site: Site,
    pub pos: usize,
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.site {
            Site::AttnQuery { layer, head } => write!(f, "q.l{layer}.h{head}.p{}", self.pos),
            Site::AttnKey { layer, head } => write!(f, "k.l{layer}.h{head}.p{}", self.pos),
            Site::AttnValue { layer, head } => write!(f, "v.l{layer}.h{head}.p{}", self.pos),
            Site::AttnOut { layer, head } => write!(f, "o.l{layer}.h{head}.p{}", self.pos),
            Site::Neuron { layer, index } => write!(f, "n.l{layer}.i{index}.p{}", self.pos),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeFamily {
    AttentionNodes,
    NeuronNodes,
}

/// Number of nodes in a family, as a closed-form count. Useful for sanity
/// checks at scales far beyond what this crate will ever run.
pub fn node_count(family: NodeFamily, n_layers: u64, width: u64, len: u64) -> u64 {
    match family {
        // width = heads; four sites (q, k, v, out) per head.
        NodeFamily::AttentionNodes => n_layers * width * 4 * len,
        // width = d_mlp.
        NodeFamily::NeuronNodes => n_layers * width * len,
    }
}

/// Deterministic node order: layer, then site (q, k, v, out / neuron), then
/// head or neuron index, then position.
pub fn enumerate_nodes(config: &ModelConfig, prompt_len: usize, family: NodeFamily) -> Vec<NodeId> {
    let mut out = Vec::new();
    match family {
        NodeFamily::AttentionNodes => {
            for layer in 0..config.n_layers {
                for site_kind in 0..4 {
                    for head in 0..config.n_heads {
                        let site = match site_kind {
                            0 => Site::AttnQuery { layer, head },
                            1 => Site::AttnKey { layer, head },
                            2 => Site::AttnValue { layer, head },
                            _ => Site::AttnOut { layer, head },
                        };
                        for pos in 0..prompt_len {
                            out.push(NodeId { site, pos });
                        }
                    }
                }
            }
        }
        NodeFamily::NeuronNodes => {
            for layer in 0..config.n_layers {
                for index in 0..config.d_mlp {
                    for pos in 0..prompt_len {
                        out.push(NodeId { site: Site::Neuron { layer, index }, pos });
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

fn tensor_names(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dh, dm) = (config.d_model, config.d_head, config.d_mlp);
    let mut names = vec![
        ("embed".to_string(), vec![config.vocab_size, d]),
        ("pos_embed".to_string(), vec![config.max_seq, d]),
        ("lnf.g".to_string(), vec![d]),
        ("lnf.b".to_string(), vec![d]),
        ("unembed".to_string(), vec![d, config.vocab_size]),
    ];
    for l in 0..config.n_layers {
        for s in ["g", "b"] {
            names.push((format!("ln1.{l}.{s}"), vec![d]));
            names.push((format!("ln2.{l}.{s}"), vec![d]));
        }
        for h in 0..config.n_heads {
            for w in ["Wq", "Wk", "Wv"] {
                names.push((format!("{w}.{l}.{h}"), vec![d, dh]));
            }
            for b in ["bq", "bk", "bv"] {
                names.push((format!("{b}.{l}.{h}"), vec![dh]));
            }
            names.push((format!("Wo.{l}.{h}"), vec![dh, d]));
        }
        names.push((format!("bo.{l}"), vec![d]));
        names.push((format!("Win.{l}"), vec![d, dm]));
        names.push((format!("bin.{l}"), vec![dm]));
        names.push((format!("Wout.{l}"), vec![dm, d]));
        names.push((format!("bout.{l}"), vec![d]));
    }
    names
}

/// Immutable-after-load named tensor store. Held in f64 in memory; the on-disk
/// format is f32.
#[derive(Clone, Debug)]
pub struct WeightStore {
    tensors: HashMap<String, Tensor>,
}

impl WeightStore {
    pub fn get(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn bindings(&self) -> &HashMap<String, Tensor> {
        &self.tensors
    }

    fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).unwrap()
    }

    /// Replace one tensor, keeping its shape. Supports the targeted edits
    /// used to construct models with known failure modes.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let cur = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if cur.shape() != t.shape() {
            return Err(Error::InvalidConfig(format!(
                "tensor {name} has shape {:?}, replacement has {:?}",
                cur.shape(),
                t.shape()
            )));
        }
        *cur = t;
        Ok(())
    }
}

/// Deterministic scaled-normal initialization.
pub fn generate_weights(config: &ModelConfig, seed: u64) -> Result<WeightStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = HashMap::new();
    for (name, shape) in tensor_names(config) {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = if name.contains(".g") && (name.starts_with("ln") || name == "lnf.g") {
            vec![1.0; numel]
        } else if name.contains(".b") && (name.starts_with("ln") || name == "lnf.b") {
            vec![0.0; numel]
        } else if name.starts_with('b') {
            vec![0.0; numel]
        } else {
            let fan_in = if shape.len() == 2 { shape[0] } else { shape[0] };
            let scale = 1.0 / (fan_in as f64).sqrt();
            (0..numel).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(WeightStore { tensors })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: String,
    config: ModelConfig,
    data_file: String,
    sha256: String,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Write `manifest.json` (at `manifest_path`) plus a sibling `weights.bin`.
pub fn save_model(manifest_path: &Path, config: &ModelConfig, weights: &WeightStore) -> Result<()> {
    let mut entries = BTreeMap::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, shape) in tensor_names(config) {
        let t = weights.tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        entries.insert(name, TensorEntry { shape, dtype: "f32".to_string(), offset });
    }
    let mut hasher = Sha256::new();
    hasher.update(&blob);
    let sha256 = format!("{:x}", hasher.finalize());
    let data_file = "weights.bin".to_string();
    let manifest = Manifest {
        version: MANIFEST_VERSION.to_string(),
        config: config.clone(),
        data_file: data_file.clone(),
        sha256,
        tensors: entries,
    };
    let dir = manifest_path.parent().map(PathBuf::from).unwrap_or_default();
    std::fs::create_dir_all(&dir)?;
    std::fs::File::create(dir.join(&data_file))?.write_all(&blob)?;
    std::fs::File::create(manifest_path)?
        .write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

pub fn load_model(manifest_path: &Path) -> Result<Model> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::BadVersion(manifest.version));
    }
    manifest.config.validate()?;
    let dir = manifest_path.parent().map(PathBuf::from).unwrap_or_default();
    let mut blob = Vec::new();
    std::fs::File::open(dir.join(&manifest.data_file))?.read_to_end(&mut blob)?;
    let mut hasher = Sha256::new();
    hasher.update(&blob);
    let actual = format!("{:x}", hasher.finalize());
    if actual != manifest.sha256 {
        return Err(Error::ChecksumMismatch { expected: manifest.sha256, actual });
    }
    let mut tensors = HashMap::new();
    for (name, shape) in tensor_names(&manifest.config) {
        let entry = manifest.tensors.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if entry.shape != shape {
            return Err(Error::InvalidConfig(format!(
                "tensor `{name}` has shape {:?}, config implies {:?}",
                entry.shape, shape
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::InvalidConfig(format!(
                "tensor `{name}` has unsupported dtype `{}`",
                entry.dtype
            )));
        }
        let numel: usize = shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::InvalidConfig(format!(
                "tensor `{name}` extends past end of weight file"
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    Ok(Model { config: manifest.config, weights: WeightStore { tensors } })
}

// ---------------------------------------------------------------------------
// Model and traced forward pass
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: WeightStore,
}

impl Model {
    pub fn new(config: ModelConfig, weights: WeightStore) -> Result<Self> {
        config.validate()?;
        Ok(Model { config, weights })
    }

    pub fn from_seed(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = generate_weights(&config, seed)?;
        Ok(Model { config, weights })
    }

    fn check_prompt(&self, prompt: &[usize]) -> Result<()> {
        if prompt.is_empty() {
            return Err(Error::InvalidConfig("empty prompt".to_string()));
        }
        if prompt.len() > self.config.max_seq {
            return Err(Error::PromptTooLong { len: prompt.len(), max: self.config.max_seq });
        }
        if let Some(&bad) = prompt.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id: bad as u32, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Record the full forward computation for one prompt. The trace owns the
    /// tape; callers may append further ops (e.g. a metric head) before
    /// running it.
    pub fn trace(&self, prompt: &[usize], tap_weights: bool) -> Result<Trace> {
        self.check_prompt(prompt)?;
        let cfg = &self.config;
        let len = prompt.len();
        let mut tape = Tape::new();
        let mut weight_ids: HashMap<String, ValueId> = HashMap::new();
        let mut win = |tape: &mut Tape, name: String, shape: Vec<usize>| -> ValueId {
            let id = tape.input(&name, shape);
            if tap_weights {
                tape.tap(id);
            }
            weight_ids.insert(name, id);
            id
        };

        let embed = win(&mut tape, "embed".into(), vec![cfg.vocab_size, cfg.d_model]);
        let pos_embed = win(&mut tape, "pos_embed".into(), vec![cfg.max_seq, cfg.d_model]);
        let tok = tape.embed(embed, prompt.to_vec())?;
        let pos = tape.embed(pos_embed, (0..len).collect())?;
        let mut x = tape.add(tok, pos)?;

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let ln1g = win(&mut tape, format!("ln1.{l}.g"), vec![cfg.d_model]);
            let ln1b = win(&mut tape, format!("ln1.{l}.b"), vec![cfg.d_model]);
            let h = tape.layer_norm(x, ln1g, ln1b, LN_EPS)?;

            let mut q_ids = Vec::new();
            let mut k_ids = Vec::new();
            let mut v_ids = Vec::new();
            let mut z_ids = Vec::new();
            let mut attn_ids = Vec::new();
            let mut score_ids = Vec::new();
            let mut head_outs = Vec::new();
            for hd in 0..cfg.n_heads {
                let wq = win(&mut tape, format!("Wq.{l}.{hd}"), vec![cfg.d_model, cfg.d_head]);
                let bq = win(&mut tape, format!("bq.{l}.{hd}"), vec![cfg.d_head]);
                let wk = win(&mut tape, format!("Wk.{l}.{hd}"), vec![cfg.d_model, cfg.d_head]);
                let bk = win(&mut tape, format!("bk.{l}.{hd}"), vec![cfg.d_head]);
                let wv = win(&mut tape, format!("Wv.{l}.{hd}"), vec![cfg.d_model, cfg.d_head]);
                let bv = win(&mut tape, format!("bv.{l}.{hd}"), vec![cfg.d_head]);
                let wo = win(&mut tape, format!("Wo.{l}.{hd}"), vec![cfg.d_head, cfg.d_model]);

                let q0 = tape.matmul(h, wq)?;
                let q = tape.add_row(q0, bq)?;
                let k0 = tape.matmul(h, wk)?;
                let k = tape.add_row(k0, bk)?;
                let v0 = tape.matmul(h, wv)?;
                let v = tape.add_row(v0, bv)?;
                let kt = tape.transpose(k)?;
                let raw = tape.matmul(q, kt)?;
                let scores = tape.scale(raw, 1.0 / (cfg.d_head as f64).sqrt());
                let attn = tape.softmax_causal(scores)?;
                let z = tape.matmul(attn, v)?;
                let out = tape.matmul(z, wo)?;
                for id in [q, k, v, z, attn, scores] {
                    tape.tap(id);
                }
                q_ids.push(q);
                k_ids.push(k);
                v_ids.push(v);
                z_ids.push(z);
                attn_ids.push(attn);
                score_ids.push(scores);
                head_outs.push(out);
            }
            let bo = win(&mut tape, format!("bo.{l}"), vec![cfg.d_model]);
            let mut summed = head_outs[0];
            for out in &head_outs[1..] {
                summed = tape.add(summed, *out)?;
            }
            let attn_contrib = tape.add_row(summed, bo)?;
            tape.tap(attn_contrib);
            x = tape.add(x, attn_contrib)?;

            let ln2g = win(&mut tape, format!("ln2.{l}.g"), vec![cfg.d_model]);
            let ln2b = win(&mut tape, format!("ln2.{l}.b"), vec![cfg.d_model]);
            let m = tape.layer_norm(x, ln2g, ln2b, LN_EPS)?;
            let wi = win(&mut tape, format!("Win.{l}"), vec![cfg.d_model, cfg.d_mlp]);
            let bi = win(&mut tape, format!("bin.{l}"), vec![cfg.d_mlp]);
            let wo2 = win(&mut tape, format!("Wout.{l}"), vec![cfg.d_mlp, cfg.d_model]);
            let bo2 = win(&mut tape, format!("bout.{l}"), vec![cfg.d_model]);
            let pre0 = tape.matmul(m, wi)?;
            let pre = tape.add_row(pre0, bi)?;
            let act = tape.gelu(pre);
            tape.tap(act);
            let mc0 = tape.matmul(act, wo2)?;
            let mlp_contrib = tape.add_row(mc0, bo2)?;
            tape.tap(mlp_contrib);
            x = tape.add(x, mlp_contrib)?;

            layers.push(LayerTrace {
                q: q_ids,
                k: k_ids,
                v: v_ids,
                z: z_ids,
                attn: attn_ids,
                scores: score_ids,
                act,
                attn_contrib,
                mlp_contrib,
            });
        }

        let lnfg = win(&mut tape, "lnf.g".into(), vec![cfg.d_model]);
        let lnfb = win(&mut tape, "lnf.b".into(), vec![cfg.d_model]);
        let f = tape.layer_norm(x, lnfg, lnfb, LN_EPS)?;
        let unembed = win(&mut tape, "unembed".into(), vec![cfg.d_model, cfg.vocab_size]);
        let logits = tape.matmul(f, unembed)?;
        tape.tap(logits);

        Ok(Trace { tape, len, layers, logits, weight_ids })
    }

    /// Forward pass with every node activation cached.
    pub fn run_with_cache(&self, prompt: &[usize]) -> Result<ActivationRecord> {
        let trace = self.trace(prompt, false)?;
        let run = trace.tape.forward(self.weights.bindings())?;
        if !run.value(trace.logits).all_finite() {
            return Err(Error::NonFinite("forward pass".to_string()));
        }
        Ok(ActivationRecord { trace, run })
    }
}

pub struct LayerTrace {
    pub q: Vec<ValueId>,
    pub k: Vec<ValueId>,
    pub v: Vec<ValueId>,
    pub z: Vec<ValueId>,
    /// Attention probabilities, `[len, len]`, causal.
    pub attn: Vec<ValueId>,
    /// Scaled pre-softmax attention logits, `[len, len]`.
    pub scores: Vec<ValueId>,
    /// Post-GELU neuron activations, `[len, d_mlp]`.
    pub act: ValueId,
    pub attn_contrib: ValueId,
    pub mlp_contrib: ValueId,
}

/// Where a node's value lives within a trace.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeLoc {
    /// Row `pos` of a `[len, d_head]` matrix value.
    Row { value: ValueId, pos: usize },
    /// Element `(pos, index)` of a `[len, d_mlp]` matrix value.
    Elem { value: ValueId, pos: usize, index: usize },
}

impl NodeLoc {
    pub fn value_id(&self) -> ValueId {
        match *self {
            NodeLoc::Row { value, .. } | NodeLoc::Elem { value, .. } => value,
        }
    }
}

pub struct Trace {
    pub tape: Tape,
    pub len: usize,
    pub layers: Vec<LayerTrace>,
    pub logits: ValueId,
    weight_ids: HashMap<String, ValueId>,
}

impl Trace {
    pub fn weight_id(&self, name: &str) -> Option<ValueId> {
        self.weight_ids.get(name).copied()
    }

    pub fn weight_ids(&self) -> &HashMap<String, ValueId> {
        &self.weight_ids
    }

    pub fn locate(&self, node: NodeId) -> Result<NodeLoc> {
        if node.pos >= self.len {
            return Err(Error::InvalidNode(node.to_string()));
        }
        let check = |layer: usize, head: usize, per: &[ValueId]| -> Result<ValueId> {
            if layer >= self.layers.len() || head >= per.len() {
                Err(Error::InvalidNode(node.to_string()))
            } else {
                Ok(per[head])
            }
        };
        match node.site {
            Site::AttnQuery { layer, head } => {
                if layer >= self.layers.len() {
                    return Err(Error::InvalidNode(node.to_string()));
                }
                Ok(NodeLoc::Row { value: check(layer, head, &self.layers[layer].q)?, pos: node.pos })
            }
            Site::AttnKey { layer, head } => {
                if layer >= self.layers.len() {
                    return Err(Error::InvalidNode(node.to_string()));
                }
                Ok(NodeLoc::Row { value: check(layer, head, &self.layers[layer].k)?, pos: node.pos })
            }
            Site::AttnValue { layer, head } => {
                if layer >= self.layers.len() {
                    return Err(Error::InvalidNode(node.to_string()));
                }
                Ok(NodeLoc::Row { value: check(layer, head, &self.layers[layer].v)?, pos: node.pos })
            }
            Site::AttnOut { layer, head } => {
                if layer >= self.layers.len() {
                    return Err(Error::InvalidNode(node.to_string()));
                }
                Ok(NodeLoc::Row { value: check(layer, head, &self.layers[layer].z)?, pos: node.pos })
            }
            Site::Neuron { layer, index } => {
                if layer >= self.layers.len() {
                    return Err(Error::InvalidNode(node.to_string()));
                }
                Ok(NodeLoc::Elem { value: self.layers[layer].act, pos: node.pos, index })
            }
        }
    }
}

/// Cached activations for one prompt.
pub struct ActivationRecord {
    pub trace: Trace,
    pub run: RunValues,
}

impl ActivationRecord {
    pub fn logits(&self) -> &Tensor {
        self.run.value(self.trace.logits)
    }

    /// The node's activation: a d_head-length vector for attention nodes, a
    /// single element for neurons.
    pub fn node_activation(&self, node: NodeId) -> Result<Vec<f64>> {
        match self.trace.locate(node)? {
            NodeLoc::Row { value, pos } => Ok(self.run.value(value).row(pos).to_vec()),
            NodeLoc::Elem { value, pos, index } => Ok(vec![self.run.value(value).at(pos, index)]),
        }
    }

    /// Attention probabilities for one head, `[len, len]`.
    pub fn attn_probs(&self, layer: usize, head: usize) -> &Tensor {
        self.run.value(self.trace.layers[layer].attn[head])
    }
}

// ---------------------------------------------------------------------------
// Plain-SGD trainer
// ---------------------------------------------------------------------------

/// One training example: prompt plus next-token target at the final position.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub prompt: Vec<usize>,
    pub target: usize,
}

/// Train in place by plain SGD on the final-position negative log probability.
/// Returns the mean loss per pass over the examples.
pub fn train_sgd(
    model: &mut Model,
    examples: &[TrainExample],
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::InvalidConfig("no training examples".to_string()));
    }
    // One trace per example; the graph only depends on the token ids.
    let mut traces = Vec::with_capacity(examples.len());
    for ex in examples {
        if ex.target >= model.config.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: ex.target as u32,
                vocab: model.config.vocab_size,
            });
        }
        let mut trace = model.trace(&ex.prompt, true)?;
        let final_row = trace.tape.row_select(trace.logits, ex.prompt.len() - 1)?;
        let lse = trace.tape.log_sum_exp(final_row)?;
        let picked = trace.tape.pick_elem(final_row, ex.target)?;
        let loss = trace.tape.sub(lse, picked)?;
        traces.push((trace, loss));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        // Fisher-Yates with the epoch's RNG stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut total = 0.0;
        for &i in &order {
            let (trace, loss) = &traces[i];
            let run = trace.tape.forward(model.weights.bindings())?;
            let loss_val = run.value(*loss).item();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite("training loss".to_string()));
            }
            total += loss_val;
            let grads = trace.tape.backward(&run, *loss, None, &Default::default())?;
            for (name, &vid) in trace.weight_ids() {
                if let Some(g) = grads.get(vid) {
                    let w = model.weights.get_mut(name);
                    for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                        *wv -= lr * gv;
                    }
                }
            }
        }
        history.push(total / examples.len() as f64);
    }
    Ok(history)
}
