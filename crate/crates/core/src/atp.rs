//! Gradient-based contribution estimators.
//!
//! Plain attribution patching approximates each node's intervention effect by
//! a first-order Taylor term: (n(noise) - n(clean)) . dM/dn, from two forward
//! passes and one backward per prompt pair. Two refinements address its known
//! false-negative modes:
//!
//! * the QK fix recomputes the attention softmax exactly when patching a
//!   query or key, then linearizes only from the attention weights onward
//!   (saturated-softmax failure mode);
//! * GradDrop re-runs the backward pass once per layer with that layer's
//!   residual contribution's gradient zeroed, disrupting cancellation between
//!   direct and indirect effects.
//!
//! Applying both yields the starred estimator. All cost accounting is in
//! forward/backward pass-equivalents and is exact.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::model::{enumerate_nodes, NodeFamily, NodeId, Site};
use crate::patching::{add_node_override, PairContext, PatchEngine};
use crate::tape::{BackwardOptions, Gradients, Overrides};
use crate::tensor::{dot, log_sum_exp, softmax_into, Tensor};

#[derive(Clone, Copy, Debug, Default)]
pub struct AtpOptions {
    /// Recompute the attention softmax exactly for query/key nodes.
    pub qk_fix: bool,
    /// Average over per-layer gradient-dropped backward passes.
    pub grad_drop: bool,
    /// Treat LayerNorm denominators as constants in the backward pass.
    pub frozen_ln: bool,
}

impl AtpOptions {
    pub fn plain() -> Self {
        Self::default()
    }

    /// QK fix + GradDrop: the starred estimator.
    pub fn starred() -> Self {
        AtpOptions { qk_fix: true, grad_drop: true, frozen_ln: false }
    }

    pub fn method_name(&self) -> String {
        let base = match (self.qk_fix, self.grad_drop) {
            (false, false) => "atp",
            (true, false) => "atp+qkfix",
            (false, true) => "atp+graddrop",
            (true, true) => "atp*",
        };
        if self.frozen_ln {
            format!("{base}+frozenln")
        } else {
            base.to_string()
        }
    }
}

/// Exact pass-equivalent accounting for an estimation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CostAccount {
    pub forwards: u64,
    pub backwards: u64,
    /// Extra forward-equivalents charged for QK-fix recomputation.
    pub qk_fix_extra: u64,
}

impl CostAccount {
    pub fn pass_equivalents(&self) -> u64 {
        self.forwards + self.backwards + self.qk_fix_extra
    }
}

/// Per-node estimates over a node family.
pub struct EstimateTable {
    pub method: String,
    pub nodes: Vec<NodeId>,
    /// Aggregated non-negative estimates (absolute value inside the
    /// pair expectation).
    pub estimates: Vec<f64>,
    /// Per-pair values before aggregation: signed Taylor terms for the
    /// non-GradDrop estimators, non-negative per-pair layer averages with
    /// GradDrop.
    pub per_pair: Vec<Vec<f64>>,
    pub pair_weights: Vec<f64>,
    pub cost: CostAccount,
}

impl EstimateTable {
    /// Alternative aggregation with the absolute value outside the pair
    /// expectation (the ground-truth convention). Only meaningful for
    /// estimators whose per-pair values are signed.
    pub fn abs_outside_aggregate(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes.len()];
        for (pair_vals, &w) in self.per_pair.iter().zip(&self.pair_weights) {
            for (o, &v) in out.iter_mut().zip(pair_vals) {
                *o += w * v;
            }
        }
        out.iter().map(|v| v.abs()).collect()
    }

    /// Node indices sorted by descending estimate, ties broken by ascending
    /// node index.
    pub fn ranking(&self) -> Vec<usize> {
        rank_descending(&self.estimates)
    }
}

/// Indices sorted by descending value; ties by ascending index.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    order
}

// ---------------------------------------------------------------------------
// QK-fix row primitives
// ---------------------------------------------------------------------------

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// ln(1 - e^x) for x <= 0.
fn ln_one_minus_exp(x: f64) -> f64 {
    (-x.exp_m1()).ln()
}

/// Key-fix contributions of one query row, via the stable O(n) algorithm.
///
/// `a` is the clean attention-logit row (causal prefix), `a_patch[t]` the
/// logit of key t recomputed with the noise key, and `g` the metric gradient
/// on the attention probabilities of this row. Returns r with `r[t]` the
/// row's contribution to key node t's corrected estimate. A single-entry row
/// returns zeros: its attention weight is pinned to 1.
pub fn key_fix_row(a: &[f64], a_patch: &[f64], g: &[f64]) -> Vec<f64> {
    let n = a.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let lse = log_sum_exp(a);
    let ell: Vec<f64> = a.iter().map(|v| v - lse).collect();

    let t_star = (0..n).fold(0, |best, t| if a[t] > a[best] { t } else { best });
    let mut d: Vec<f64> = ell.iter().map(|&l| l - ln_one_minus_exp(l)).collect();
    // More stable d[t*] when a[t*] dominates every other logit.
    let m2 = (0..n)
        .filter(|&t| t != t_star)
        .map(|t| a[t])
        .fold(f64::NEG_INFINITY, f64::max);
    let rest: Vec<f64> = (0..n).filter(|&t| t != t_star).map(|t| a[t] - m2).collect();
    d[t_star] = a[t_star] - m2 - log_sum_exp(&rest);

    let ell_patch: Vec<f64> =
        (0..n).map(|t| log_sigmoid(d[t] + a_patch[t] - a[t])).collect();
    let b = {
        let mut acc = 0.0;
        for t in 0..n {
            acc += ell[t].exp() * g[t];
        }
        acc
    };

    // For a dominant entry (attention weight near 1), g_t - b cancels
    // catastrophically; expand it as sum_{j != t} attn_j (g_t - g_j), which
    // is exact. At most one entry can exceed weight 1/2.
    let heavy = (0..n).find(|&t| ell[t] > -std::f64::consts::LN_2);
    let g_minus_b = |t: usize| -> f64 {
        if Some(t) == heavy {
            (0..n).filter(|&j| j != t).map(|j| ell[j].exp() * (g[t] - g[j])).sum()
        } else {
            g[t] - b
        }
    };

    let mut r = vec![0.0; n];
    for t in 0..n {
        let delta_ell = ell_patch[t] - ell[t];
        // Scaling factor s_t = Delta_t attn_t / (1 - attn_t), computed in log
        // space with two overflow-guarded branches.
        let s = if ell_patch[t] > ell[t] {
            (d[t] + delta_ell + ln_one_minus_exp(-delta_ell)).exp()
        } else {
            -(d[t] + ln_one_minus_exp(delta_ell)).exp()
        };
        r[t] = s * g_minus_b(t);
    }
    r
}

/// Naive O(n^2)-per-row key-fix oracle: for each key t, rebuild the full
/// softmax with that single logit patched and dot the probability change with
/// the gradient. Reference implementation for [`key_fix_row`].
pub fn key_fix_row_naive(a: &[f64], a_patch: &[f64], g: &[f64]) -> Vec<f64> {
    let n = a.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut clean = vec![0.0; n];
    softmax_into(a, &mut clean);
    let mut r = vec![0.0; n];
    for t in 0..n {
        let mut patched_logits = a.to_vec();
        patched_logits[t] = a_patch[t];
        let mut patched = vec![0.0; n];
        softmax_into(&patched_logits, &mut patched);
        r[t] = (0..n).map(|j| (patched[j] - clean[j]) * g[j]).sum();
    }
    r
}

/// Query-fix estimate for one query row: recompute the softmax with the
/// patched logits and dot the probability change with the gradient.
pub fn query_fix_row(a_patch: &[f64], attn_clean: &[f64], g: &[f64]) -> f64 {
    let n = a_patch.len();
    if n < 2 {
        return 0.0;
    }
    let mut patched = vec![0.0; n];
    softmax_into(a_patch, &mut patched);
    (0..n).map(|t| (patched[t] - attn_clean[t]) * g[t]).sum()
}

// ---------------------------------------------------------------------------
// Per-pair machinery
// ---------------------------------------------------------------------------

/// Pair-level patched attention logits for one head (gradient-independent,
/// shared by all GradDrop backward passes).
struct HeadPatchData {
    /// softmax-input logits with noise queries against clean keys, [len, len].
    q_patch_scores: Tensor,
    /// logits with clean queries against noise keys, [len, len].
    k_patch_scores: Tensor,
}

fn head_patch_data(ctx: &PairContext, layer: usize, head: usize, d_head: usize) -> HeadPatchData {
    let scale = 1.0 / (d_head as f64).sqrt();
    let q_clean = ctx.source_run.value(ctx.source_trace.layers[layer].q[head]);
    let k_clean = ctx.source_run.value(ctx.source_trace.layers[layer].k[head]);
    let q_noise = ctx.donor_run.value(ctx.donor_trace.layers[layer].q[head]);
    let k_noise = ctx.donor_run.value(ctx.donor_trace.layers[layer].k[head]);
    let len = q_clean.rows();
    let mut qp = Tensor::zeros(vec![len, len]);
    let mut kp = Tensor::zeros(vec![len, len]);
    for r in 0..len {
        for t in 0..len {
            qp.set(r, t, dot(q_noise.row(r), k_clean.row(t)) * scale);
            kp.set(r, t, dot(q_clean.row(r), k_noise.row(t)) * scale);
        }
    }
    HeadPatchData { q_patch_scores: qp, k_patch_scores: kp }
}

/// Signed per-node Taylor estimates for one pair, in enumeration order, given
/// one backward pass's gradients.
fn estimates_with_grads(
    engine: &PatchEngine,
    ctx: &PairContext,
    family: NodeFamily,
    opts: &AtpOptions,
    grads: &Gradients,
    patch_data: &[Vec<HeadPatchData>],
) -> Vec<f64> {
    let cfg = &engine.model.config;
    let len = ctx.source_trace.len;
    let mut out = Vec::new();
    match family {
        NodeFamily::NeuronNodes => {
            for l in 0..cfg.n_layers {
                let src = ctx.source_run.value(ctx.source_trace.layers[l].act);
                let donor = ctx.donor_run.value(ctx.donor_trace.layers[l].act);
                let g = grads.expect(ctx.source_trace.layers[l].act);
                for i in 0..cfg.d_mlp {
                    for p in 0..len {
                        out.push((donor.at(p, i) - src.at(p, i)) * g.at(p, i));
                    }
                }
            }
        }
        NodeFamily::AttentionNodes => {
            for l in 0..cfg.n_layers {
                let lt = &ctx.source_trace.layers[l];
                let dt = &ctx.donor_trace.layers[l];
                // Site order: q, k, v, out — matching enumerate_nodes.
                for site in 0..4 {
                    for h in 0..cfg.n_heads {
                        match site {
                            0 if opts.qk_fix => {
                                let g_attn = grads.expect(lt.attn[h]);
                                let attn = ctx.source_run.value(lt.attn[h]);
                                let qp = &patch_data[l][h].q_patch_scores;
                                for p in 0..len {
                                    out.push(query_fix_row(
                                        &qp.row(p)[..=p],
                                        &attn.row(p)[..=p],
                                        &g_attn.row(p)[..=p],
                                    ));
                                }
                            }
                            1 if opts.qk_fix => {
                                let g_attn = grads.expect(lt.attn[h]);
                                let scores = ctx.source_run.value(lt.scores[h]);
                                let kp = &patch_data[l][h].k_patch_scores;
                                let mut per_key = vec![0.0; len];
                                for p in 0..len {
                                    let r = key_fix_row(
                                        &scores.row(p)[..=p],
                                        &kp.row(p)[..=p],
                                        &g_attn.row(p)[..=p],
                                    );
                                    for (t, rv) in r.iter().enumerate() {
                                        per_key[t] += rv;
                                    }
                                }
                                out.extend(per_key);
                            }
                            _ => {
                                let (src_id, donor_id) = match site {
                                    0 => (lt.q[h], dt.q[h]),
                                    1 => (lt.k[h], dt.k[h]),
                                    2 => (lt.v[h], dt.v[h]),
                                    _ => (lt.z[h], dt.z[h]),
                                };
                                let src = ctx.source_run.value(src_id);
                                let donor = ctx.donor_run.value(donor_id);
                                let g = grads.expect(src_id);
                                for p in 0..len {
                                    let sr = src.row(p);
                                    let dr = donor.row(p);
                                    let gr = g.row(p);
                                    let mut acc = 0.0;
                                    for j in 0..cfg.d_head {
                                        acc += (dr[j] - sr[j]) * gr[j];
                                    }
                                    out.push(acc);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient-based estimates for every node of a family.
pub fn atp_estimate(
    engine: &PatchEngine,
    family: NodeFamily,
    opts: &AtpOptions,
) -> Result<EstimateTable> {
    let cfg = &engine.model.config;
    let n_layers = cfg.n_layers;
    let nodes = enumerate_nodes(cfg, engine.dist.prompt_len(), family);
    let n_pairs = engine.dist.len();
    let mut estimates = vec![0.0; nodes.len()];
    let mut per_pair = Vec::with_capacity(n_pairs);
    let mut cost = CostAccount::default();

    for i in 0..n_pairs {
        let ctx = engine.pair_context(i);
        let w = engine.dist.weight(i);
        // Both forward passes are charged to estimation, even though the
        // engine precomputes them once per pair.
        cost.forwards += 2;
        if opts.qk_fix {
            cost.qk_fix_extra += 1;
        }
        let patch_data: Vec<Vec<HeadPatchData>> = if opts.qk_fix {
            (0..n_layers)
                .map(|l| {
                    (0..cfg.n_heads).map(|h| head_patch_data(ctx, l, h, cfg.d_head)).collect()
                })
                .collect()
        } else {
            Vec::new()
        };

        let pair_vals: Vec<f64> = if opts.grad_drop {
            let mut acc = vec![0.0; nodes.len()];
            for l in 0..n_layers {
                let drop_set: HashSet<usize> = [
                    ctx.source_trace.layers[l].attn_contrib,
                    ctx.source_trace.layers[l].mlp_contrib,
                ]
                .into_iter()
                .collect();
                let bw = BackwardOptions { drop_set, frozen_ln: opts.frozen_ln };
                let grads =
                    ctx.source_trace.tape.backward(&ctx.source_run, ctx.metric_id, None, &bw)?;
                cost.backwards += 1;
                let est = estimates_with_grads(engine, ctx, family, opts, &grads, &patch_data);
                for (a, e) in acc.iter_mut().zip(&est) {
                    *a += e.abs();
                }
            }
            acc.into_iter().map(|v| v / (n_layers as f64 - 1.0)).collect()
        } else {
            let bw = BackwardOptions { frozen_ln: opts.frozen_ln, ..Default::default() };
            let grads =
                ctx.source_trace.tape.backward(&ctx.source_run, ctx.metric_id, None, &bw)?;
            cost.backwards += 1;
            estimates_with_grads(engine, ctx, family, opts, &grads, &patch_data)
        };

        for (e, &v) in estimates.iter_mut().zip(&pair_vals) {
            // GradDrop per-pair values already carry the inner absolute value.
            *e += w * if opts.grad_drop { v } else { v.abs() };
        }
        per_pair.push(pair_vals);
    }

    if estimates.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient-based estimation".to_string()));
    }
    Ok(EstimateTable {
        method: opts.method_name(),
        nodes,
        estimates,
        per_pair,
        pair_weights: (0..n_pairs).map(|i| engine.dist.weight(i)).collect(),
        cost,
    })
}

// ---------------------------------------------------------------------------
// Direct effect ratio
// ---------------------------------------------------------------------------

/// |direct effect| / |total effect| of a node on one pair, where the direct
/// effect patches the node while freezing every strictly-downstream node
/// activation to its clean value. Query/key/value nodes reach the output only
/// through their head's output node, so their direct effect is 0 by
/// definition. Returns None when the total effect is 0 (undefined ratio).
pub fn direct_effect_ratio(
    engine: &PatchEngine,
    pair_idx: usize,
    node: NodeId,
) -> Result<Option<f64>> {
    let total = engine.intervene(pair_idx, &[node])?;
    if total == 0.0 {
        return Ok(None);
    }
    let ctx = engine.pair_context(pair_idx);
    let cfg = &engine.model.config;
    let len = ctx.source_trace.len;

    let mut ov = Overrides::new();
    add_node_override(&mut ov, ctx, node)?;
    let node_layer = node.site.layer();

    // Freeze a whole [len, _] value to the clean run, row by row.
    let mut freeze = |value_id: usize| {
        for p in 0..len {
            ov.set_row(value_id, p, ctx.source_run.value(value_id).row(p).to_vec());
        }
    };
    let freeze_attention_sites = |freeze: &mut dyn FnMut(usize), layer: usize| {
        let lt = &ctx.source_trace.layers[layer];
        for h in 0..cfg.n_heads {
            freeze(lt.q[h]);
            freeze(lt.k[h]);
            freeze(lt.v[h]);
            freeze(lt.z[h]);
        }
    };

    match node.site {
        Site::AttnQuery { layer, head: _ }
        | Site::AttnKey { layer, head: _ }
        | Site::AttnValue { layer, head: _ } => {
            // Their entire effect routes through the same layer's output
            // nodes; freezing those leaves no path at all.
            let lt = &ctx.source_trace.layers[layer];
            for h in 0..cfg.n_heads {
                freeze(lt.z[h]);
            }
            freeze(lt.act);
            for l in (layer + 1)..cfg.n_layers {
                freeze_attention_sites(&mut freeze, l);
                freeze(ctx.source_trace.layers[l].act);
            }
        }
        Site::AttnOut { layer, .. } => {
            // The same block's MLP is downstream in a serial block.
            freeze(ctx.source_trace.layers[layer].act);
            for l in (layer + 1)..cfg.n_layers {
                freeze_attention_sites(&mut freeze, l);
                freeze(ctx.source_trace.layers[l].act);
            }
        }
        Site::Neuron { layer, .. } => {
            for l in (layer + 1)..cfg.n_layers {
                freeze_attention_sites(&mut freeze, l);
                freeze(ctx.source_trace.layers[l].act);
            }
        }
    }
    let _ = node_layer;

    // Re-apply the node's own patch last so a freeze of its host tensor
    // cannot clobber it (relevant only for same-tensor freezes).
    add_node_override(&mut ov, ctx, node)?;

    let direct = engine.intervene_with_overrides(pair_idx, &ov)?;
    Ok(Some(direct.abs() / total.abs()))
}

/// Maximum absolute attention-probability change from patching each query or
/// key node, over all pairs and affected rows. None for nodes that do not
/// feed the attention softmax. Uses naive per-node recomputation (fine at
/// desk scale); intended for scatter-plot style diagnostics.
pub fn max_attention_prob_delta(
    engine: &PatchEngine,
    family: NodeFamily,
) -> Result<Vec<Option<f64>>> {
    let cfg = &engine.model.config;
    let len = engine.dist.prompt_len();
    let nodes = enumerate_nodes(cfg, len, family);
    let mut out = vec![None; nodes.len()];
    if family == NodeFamily::NeuronNodes {
        return Ok(out);
    }
    for (ni, node) in nodes.iter().enumerate() {
        let (layer, head, is_query) = match node.site {
            Site::AttnQuery { layer, head } => (layer, head, true),
            Site::AttnKey { layer, head } => (layer, head, false),
            _ => continue,
        };
        let mut worst: f64 = 0.0;
        for i in 0..engine.dist.len() {
            let ctx = engine.pair_context(i);
            let pd = head_patch_data(ctx, layer, head, cfg.d_head);
            let scores = ctx.source_run.value(ctx.source_trace.layers[layer].scores[head]);
            let attn = ctx.source_run.value(ctx.source_trace.layers[layer].attn[head]);
            if is_query {
                let p = node.pos;
                if p == 0 {
                    continue;
                }
                let mut patched = vec![0.0; p + 1];
                softmax_into(&pd.q_patch_scores.row(p)[..=p], &mut patched);
                for t in 0..=p {
                    worst = worst.max((patched[t] - attn.at(p, t)).abs());
                }
            } else {
                let t = node.pos;
                for p in t..len {
                    if p == 0 {
                        continue;
                    }
                    let mut row = scores.row(p)[..=p].to_vec();
                    row[t] = pd.k_patch_scores.at(p, t);
                    let mut patched = vec![0.0; p + 1];
                    softmax_into(&row, &mut patched);
                    for j in 0..=p {
                        worst = worst.max((patched[j] - attn.at(p, j)).abs());
                    }
                }
            }
        }
        out[ni] = Some(worst);
    }
    Ok(out)
}
