//! Ground-truth intervention engine.
//!
//! An intervention re-runs the model forward with selected node activations
//! overwritten by their values from the paired prompt, and reports the change
//! in the metric. This is exact but costs one forward pass per (node set,
//! prompt pair); everything else in the crate is an approximation of, or a
//! budgeted search over, the numbers this module produces.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{enumerate_nodes, Model, NodeFamily, NodeId, NodeLoc, Trace};
use crate::tape::{Overrides, RunValues, ValueId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    /// lse(logits) - logits[target]; the loss on the clean target.
    NegLogProb,
    /// logits[target] - logits[noise_target].
    LogitDiff,
    /// logits[target] - lse(logits excluding target): log-odds of the target
    /// against all alternatives.
    LogOdds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchDirection {
    /// Forward pass on the clean prompt, patched activations from noise.
    Noising,
    /// Forward pass on the noise prompt, patched activations from clean.
    Denoising,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub direction: PatchDirection,
}

impl Default for Metric {
    fn default() -> Self {
        Metric { kind: MetricKind::NegLogProb, direction: PatchDirection::Noising }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub clean: Vec<usize>,
    pub noise: Vec<usize>,
    /// Clean next-token target; the metric is always evaluated against this.
    pub target: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl PromptPair {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.clean.len() != self.noise.len() {
            return Err(Error::LengthMismatch { clean: self.clean.len(), noise: self.noise.len() });
        }
        if self.clean.is_empty() {
            return Err(Error::InvalidConfig("empty prompt pair".to_string()));
        }
        for &t in self.clean.iter().chain(&self.noise).chain([&self.target]) {
            if t >= vocab_size {
                return Err(Error::TokenOutOfRange { id: t as u32, vocab: vocab_size });
            }
        }
        if let Some(nt) = self.noise_target {
            if nt >= vocab_size {
                return Err(Error::TokenOutOfRange { id: nt as u32, vocab: vocab_size });
            }
        }
        Ok(())
    }
}

/// Nonempty weighted collection of equal-length prompt pairs; weights are
/// normalized to sum to 1 on construction.
#[derive(Clone, Debug)]
pub struct PromptPairDistribution {
    pairs: Vec<PromptPair>,
    weights: Vec<f64>,
}

impl PromptPairDistribution {
    pub fn new(pairs: Vec<PromptPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidConfig("empty prompt pair distribution".to_string()));
        }
        let len0 = pairs[0].clean.len();
        for p in &pairs {
            if p.clean.len() != p.noise.len() {
                return Err(Error::LengthMismatch { clean: p.clean.len(), noise: p.noise.len() });
            }
            if p.clean.len() != len0 {
                return Err(Error::InvalidConfig(
                    "all pairs in a distribution must have the same length".to_string(),
                ));
            }
        }
        let raw: Vec<f64> =
            pairs.iter().map(|p| p.weight.unwrap_or(1.0)).collect();
        if raw.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            return Err(Error::InvalidConfig("pair weights must be positive".to_string()));
        }
        let total: f64 = raw.iter().sum();
        let weights = raw.iter().map(|w| w / total).collect();
        Ok(PromptPairDistribution { pairs, weights })
    }

    pub fn single(pair: PromptPair) -> Result<Self> {
        Self::new(vec![pair])
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pairs: Vec<PromptPair> = serde_json::from_str(text)?;
        Self::new(pairs)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.pairs)?)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pair(&self, i: usize) -> &PromptPair {
        &self.pairs[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn prompt_len(&self) -> usize {
        self.pairs[0].clean.len()
    }
}

/// Per-pair precomputed traces. The "source" prompt is the one the forward
/// pass runs on (clean for noising, noise for denoising); the "donor"
/// provides the patched activations.
pub struct PairContext {
    pub source_trace: Trace,
    pub source_run: RunValues,
    pub donor_trace: Trace,
    pub donor_run: RunValues,
    pub metric_id: ValueId,
    pub base_metric: f64,
}

pub struct PatchEngine<'m> {
    pub model: &'m Model,
    pub metric: Metric,
    pub dist: PromptPairDistribution,
    pairs: Vec<PairContext>,
    forward_calls: AtomicU64,
}

/// Append the metric head to a traced forward pass. Evaluated at the final
/// position against the clean target.
pub fn append_metric(trace: &mut Trace, metric: &Metric, pair: &PromptPair) -> Result<ValueId> {
    let row = trace.tape.row_select(trace.logits, trace.len - 1)?;
    match metric.kind {
        MetricKind::NegLogProb => {
            let lse = trace.tape.log_sum_exp(row)?;
            let picked = trace.tape.pick_elem(row, pair.target)?;
            trace.tape.sub(lse, picked)
        }
        MetricKind::LogitDiff => {
            let nt = pair.noise_target.ok_or_else(|| {
                Error::InvalidConfig("LogitDiff metric requires a noise_target".to_string())
            })?;
            let a = trace.tape.pick_elem(row, pair.target)?;
            let b = trace.tape.pick_elem(row, nt)?;
            trace.tape.sub(a, b)
        }
        MetricKind::LogOdds => {
            if pair.noise_target.is_none() {
                return Err(Error::InvalidConfig(
                    "LogOdds metric requires a noise_target".to_string(),
                ));
            }
            let a = trace.tape.pick_elem(row, pair.target)?;
            let rest = trace.tape.log_sum_exp_except(row, pair.target)?;
            trace.tape.sub(a, rest)
        }
    }
}

impl<'m> PatchEngine<'m> {
    pub fn new(model: &'m Model, dist: PromptPairDistribution, metric: Metric) -> Result<Self> {
        let mut pairs = Vec::with_capacity(dist.len());
        for i in 0..dist.len() {
            let pair = dist.pair(i);
            pair.validate(model.config.vocab_size)?;
            let (src_prompt, donor_prompt) = match metric.direction {
                PatchDirection::Noising => (&pair.clean, &pair.noise),
                PatchDirection::Denoising => (&pair.noise, &pair.clean),
            };
            let mut source_trace = model.trace(src_prompt, false)?;
            let metric_id = append_metric(&mut source_trace, &metric, pair)?;
            let source_run = source_trace.tape.forward(model.weights.bindings())?;
            let donor_trace = model.trace(donor_prompt, false)?;
            let donor_run = donor_trace.tape.forward(model.weights.bindings())?;
            let base_metric = source_run.value(metric_id).item();
            if !base_metric.is_finite() {
                return Err(Error::NonFinite("baseline metric".to_string()));
            }
            pairs.push(PairContext {
                source_trace,
                source_run,
                donor_trace,
                donor_run,
                metric_id,
                base_metric,
            });
        }
        Ok(PatchEngine { model, metric, dist, pairs, forward_calls: AtomicU64::new(0) })
    }

    pub fn pair_context(&self, i: usize) -> &PairContext {
        &self.pairs[i]
    }

    /// Total patched forward passes executed so far.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Metric delta from overwriting `nodes` with the donor prompt's values
    /// on pair `pair_idx`. The empty set returns exactly 0.0 without running.
    pub fn intervene(&self, pair_idx: usize, nodes: &[NodeId]) -> Result<f64> {
        if nodes.is_empty() {
            return Ok(0.0);
        }
        let ctx = &self.pairs[pair_idx];
        let mut ov = Overrides::new();
        for &node in nodes {
            add_node_override(&mut ov, ctx, node)?;
        }
        self.intervene_with_overrides(pair_idx, &ov)
    }

    /// Metric delta from replaying the source forward pass with arbitrary
    /// activation overrides. One forward-pass equivalent of cost.
    pub fn intervene_with_overrides(&self, pair_idx: usize, ov: &Overrides) -> Result<f64> {
        let ctx = &self.pairs[pair_idx];
        let run = ctx.source_trace.tape.forward_with_overrides(self.model.weights.bindings(), ov)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let v = run.value(ctx.metric_id).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("patched metric".to_string()));
        }
        Ok(v - ctx.base_metric)
    }

    /// Signed per-pair intervention effects for one node, in pair order.
    pub fn per_pair_effects(&self, node: NodeId) -> Result<Vec<f64>> {
        (0..self.pairs.len()).map(|i| self.intervene(i, &[node])).collect()
    }

    /// True contribution c(n): absolute value of the pair-weighted mean
    /// effect (absolute value outside the expectation).
    pub fn true_contribution(&self, node: NodeId) -> Result<f64> {
        let mut acc = 0.0;
        for i in 0..self.pairs.len() {
            acc += self.dist.weight(i) * self.intervene(i, &[node])?;
        }
        Ok(acc.abs())
    }

    /// c(n) for every node of a family, plus the signed and absolute
    /// pair-weighted means (the latter feed the cancellation diagnostic).
    /// Parallel over nodes; results identical to the sequential order.
    pub fn ground_truth_table(&self, family: NodeFamily) -> Result<GroundTruth> {
        let nodes = enumerate_nodes(&self.model.config, self.dist.prompt_len(), family);
        let rows: Result<Vec<(f64, f64)>> = nodes
            .par_iter()
            .map(|&node| {
                let mut signed = 0.0;
                let mut abs = 0.0;
                for i in 0..self.pairs.len() {
                    let e = self.intervene(i, &[node])?;
                    signed += self.dist.weight(i) * e;
                    abs += self.dist.weight(i) * e.abs();
                }
                Ok((signed, abs))
            })
            .collect();
        let rows = rows?;
        Ok(GroundTruth {
            nodes,
            signed_mean: rows.iter().map(|r| r.0).collect(),
            abs_mean: rows.iter().map(|r| r.1).collect(),
            forward_passes: (rows.len() * self.pairs.len()) as u64,
        })
    }
}

/// Add an override replacing `node`'s activation with its donor value.
pub fn add_node_override(ov: &mut Overrides, ctx: &PairContext, node: NodeId) -> Result<()> {
    let src = ctx.source_trace.locate(node)?;
    let donor = ctx.donor_trace.locate(node)?;
    match (src, donor) {
        (NodeLoc::Row { value, pos }, NodeLoc::Row { value: dv, pos: dp }) => {
            ov.set_row(value, pos, ctx.donor_run.value(dv).row(dp).to_vec());
        }
        (NodeLoc::Elem { value, pos, index }, NodeLoc::Elem { value: dv, pos: dp, index: di }) => {
            ov.set_elem(value, pos, index, ctx.donor_run.value(dv).at(dp, di));
        }
        _ => unreachable!("same node locates to the same kind in both traces"),
    }
    Ok(())
}

/// Exhaustive-patching results for one node family.
pub struct GroundTruth {
    pub nodes: Vec<NodeId>,
    /// Pair-weighted mean effect E[I(n)] per node; c(n) = |signed_mean|.
    pub signed_mean: Vec<f64>,
    /// Pair-weighted mean |I(n)| per node.
    pub abs_mean: Vec<f64>,
    pub forward_passes: u64,
}

impl GroundTruth {
    pub fn contribution(&self, i: usize) -> f64 {
        self.signed_mean[i].abs()
    }

    pub fn contributions(&self) -> Vec<f64> {
        self.signed_mean.iter().map(|v| v.abs()).collect()
    }

    /// Node indices sorted by descending c(n), ties by ascending index: the
    /// oracle verification order.
    pub fn verification_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by(|&a, &b| {
            self.contribution(b)
                .partial_cmp(&self.contribution(a))
                .unwrap()
                .then(a.cmp(&b))
        });
        order
    }
}

/// A source of intervention measurements, abstracting over the real patch
/// engine and synthetic models. Node indices refer to the deterministic
/// enumeration order. Implementations count their measurement calls.
pub trait InterventionOracle: Sync {
    fn num_nodes(&self) -> usize;
    fn num_pairs(&self) -> usize;
    fn pair_weight(&self, pair: usize) -> f64;
    /// Signed effect of patching `nodes` jointly on one pair.
    fn intervene(&self, nodes: &[usize], pair: usize) -> f64;
    /// Measurements performed so far (forward-pass equivalents).
    fn calls(&self) -> u64;
}

/// [`InterventionOracle`] view of a [`PatchEngine`] over one node family.
pub struct ModelOracle<'e, 'm> {
    pub engine: &'e PatchEngine<'m>,
    pub nodes: Vec<NodeId>,
}

impl<'e, 'm> ModelOracle<'e, 'm> {
    pub fn new(engine: &'e PatchEngine<'m>, family: NodeFamily) -> Self {
        let nodes = enumerate_nodes(&engine.model.config, engine.dist.prompt_len(), family);
        ModelOracle { engine, nodes }
    }
}

impl InterventionOracle for ModelOracle<'_, '_> {
    fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn num_pairs(&self) -> usize {
        self.engine.dist.len()
    }

    fn pair_weight(&self, pair: usize) -> f64 {
        self.engine.dist.weight(pair)
    }

    fn intervene(&self, nodes: &[usize], pair: usize) -> f64 {
        let ids: Vec<NodeId> = nodes.iter().map(|&i| self.nodes[i]).collect();
        self.engine.intervene(pair, &ids).expect("intervention failed")
    }

    fn calls(&self) -> u64 {
        self.engine.forward_calls()
    }
}
