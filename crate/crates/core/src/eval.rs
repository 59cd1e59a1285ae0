//! Evaluation harness: cost-of-verified-recall curves, the inverse-rank
//! weighted geometric-mean aggregate, cancellation diagnostics, the edge
//! attribution cost model, and the layer-norm toy error surfaces.

use crate::atp::rank_descending;
use crate::error::{Error, Result};

/// Cumulative cost to reach k verified true-top-k nodes, for k = 1..=K.
#[derive(Clone, Debug, PartialEq)]
pub struct CostCurve {
    pub method: String,
    pub estimation_cost: f64,
    /// costs[k-1] = total cost (estimation + verification passes) at k.
    pub costs: Vec<f64>,
}

impl CostCurve {
    pub fn k_max(&self) -> usize {
        self.costs.len()
    }
}

/// Cost-of-verified-recall: the estimator pays `estimation_cost` up front,
/// then verifies nodes one true-effect measurement at a time in decreasing
/// order of estimated magnitude. cost_k is the total cost until
/// ceil(recall_target * k) members of the true top-k have been verified.
pub fn verified_recall_curve(
    method: &str,
    estimates: &[f64],
    truth: &[f64],
    estimation_cost: f64,
    recall_target: f64,
) -> Result<CostCurve> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::InvalidConfig(
            "estimates and truth must be nonempty and the same length".to_string(),
        ));
    }
    if !(recall_target > 0.0 && recall_target <= 1.0) {
        return Err(Error::InvalidConfig("recall target must be in (0, 1]".to_string()));
    }
    let n = truth.len();
    let sweep = rank_descending(estimates);
    // truth_rank[node] = position of node in the true ordering.
    let mut truth_rank = vec![0usize; n];
    for (pos, &node) in rank_descending(truth).iter().enumerate() {
        truth_rank[node] = pos;
    }
    let mut costs = Vec::with_capacity(n);
    for k in 1..=n {
        let needed = ((recall_target * k as f64).ceil() as usize).max(1);
        let mut hit = 0usize;
        let mut passes = 0usize;
        for &node in &sweep {
            passes += 1;
            if truth_rank[node] < k {
                hit += 1;
                if hit == needed {
                    break;
                }
            }
        }
        costs.push(estimation_cost + passes as f64);
    }
    Ok(CostCurve { method: method.to_string(), estimation_cost, costs })
}

/// Recall curve for self-verifying methods that measure nodes directly (the
/// search baselines): events are (node, cumulative cost) in measurement
/// order; cost_k is the cumulative cost at the event completing
/// ceil(recall_target * k) of the true top-k. The curve is truncated at the
/// largest k the event log can satisfy.
pub fn recall_curve_from_events(
    method: &str,
    events: &[(usize, u64)],
    truth: &[f64],
    recall_target: f64,
) -> Result<CostCurve> {
    if truth.is_empty() {
        return Err(Error::InvalidConfig("truth must be nonempty".to_string()));
    }
    if !(recall_target > 0.0 && recall_target <= 1.0) {
        return Err(Error::InvalidConfig("recall target must be in (0, 1]".to_string()));
    }
    let n = truth.len();
    let mut truth_rank = vec![usize::MAX; n];
    for (pos, &node) in rank_descending(truth).iter().enumerate() {
        truth_rank[node] = pos;
    }
    let mut costs = Vec::new();
    for k in 1..=n {
        let needed = ((recall_target * k as f64).ceil() as usize).max(1);
        let mut hit = 0usize;
        let mut cost = None;
        for &(node, cost_after) in events {
            if truth_rank[node] < k {
                hit += 1;
                if hit == needed {
                    cost = Some(cost_after as f64);
                    break;
                }
            }
        }
        match cost {
            Some(c) => costs.push(c),
            None => break,
        }
    }
    Ok(CostCurve { method: method.to_string(), estimation_cost: 0.0, costs })
}

/// Inverse-rank weighted geometric mean of a curve's costs:
/// exp( sum_k ln(cost_k)/k / sum_k 1/k ).
pub fn inverse_rank_weighted_geometric_mean(curve: &CostCurve) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &c) in curve.costs.iter().enumerate() {
        let w = 1.0 / (i + 1) as f64;
        num += w * c.ln();
        den += w;
    }
    (num / den).exp()
}

/// Relative cost of `curve` against `oracle`: the ratio of their
/// inverse-rank weighted geometric means over the shared k range.
pub fn irwrgm(curve: &CostCurve, oracle: &CostCurve) -> Result<f64> {
    let k = curve.k_max().min(oracle.k_max());
    if k == 0 {
        return Err(Error::InvalidConfig("curves must be nonempty".to_string()));
    }
    let trim = |c: &CostCurve| CostCurve {
        method: c.method.clone(),
        estimation_cost: c.estimation_cost,
        costs: c.costs[..k].to_vec(),
    };
    Ok(inverse_rank_weighted_geometric_mean(&trim(curve))
        / inverse_rank_weighted_geometric_mean(&trim(oracle)))
}

/// Fraction of total effect magnitude lost to sign cancellation across the
/// distribution: 1 - |sum I| / sum |I|, with 0/0 defined as 0.
pub fn cancellation_ratio(per_pair_effects: &[f64]) -> Result<f64> {
    if per_pair_effects.is_empty() {
        return Err(Error::InvalidConfig("effects list must be nonempty".to_string()));
    }
    let abs_sum: f64 = per_pair_effects.iter().map(|v| v.abs()).sum();
    if abs_sum == 0.0 {
        return Ok(0.0);
    }
    let signed: f64 = per_pair_effects.iter().sum();
    Ok((1.0 - signed.abs() / abs_sum).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Edge attribution cost model
// ---------------------------------------------------------------------------

/// How MLPs are treated as nodes in the edge cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeGranularity {
    MlpLayers,
    Neurons,
}

/// Edge-attribution estimator variants with distinct quadratic-cost rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeVariant {
    Base,
    /// Nonlinear MLP correction (neuron granularity only).
    MlpFix,
    QkFix,
    QkFixGradDrop,
    Star,
    StarGradDrop,
}

#[derive(Clone, Copy, Debug)]
pub struct EdgeCostQuery {
    pub granularity: EdgeGranularity,
    pub variant: EdgeVariant,
    /// Use the long-sequence factored form of the QK correction.
    pub long_form: bool,
    pub d_resid: u64,
    pub heads: u64,
    pub d_key: u64,
    pub d_value: u64,
    pub d_neurons: u64,
    pub layers: u64,
    pub tokens: u64,
}

/// Per-token, per-layer-pair multiplication counts by edge kind, plus the
/// per-token total across all C(layers, 2) layer pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeCostBreakdown {
    pub o_to_v: f64,
    pub o_to_qk: f64,
    pub o_to_mlp: f64,
    pub mlp_to_v: f64,
    pub mlp_to_qk: f64,
    pub mlp_to_mlp: f64,
    pub total: f64,
}

/// Closed-form quadratic cost of every between-layers edge kind for the
/// requested variant. Errors on combinations the model does not define
/// (base/MLP-fix long forms; MLP-fix at layer granularity; plain QK-fix rows
/// at neuron granularity, where the star variant subsumes them).
pub fn edge_cost(q: &EdgeCostQuery) -> Result<EdgeCostBreakdown> {
    if q.d_resid == 0
        || q.heads == 0
        || q.d_key == 0
        || q.d_value == 0
        || q.d_neurons == 0
        || q.layers < 2
        || q.tokens == 0
    {
        return Err(Error::InvalidConfig(
            "edge cost dimensions must be positive (layers >= 2)".to_string(),
        ));
    }
    let d = q.d_resid as f64;
    let h = q.heads as f64;
    let k = q.d_key as f64;
    let v = q.d_value as f64;
    let n = q.d_neurons as f64;
    let l = q.layers as f64;
    let t = q.tokens as f64;
    let gd = (l + 1.0) / 2.0; // gradient-drop reuse factor
    let qk_short = t + 1.0; // causal-mask average per query row
    let qk_long = (2.0 * d + t + 1.0) * k / d; // factored form, relative to D

    let unsupported = || {
        Err(Error::InvalidConfig(format!(
            "edge cost variant {:?} (long_form: {}) is not defined at {:?} granularity",
            q.variant, q.long_form, q.granularity
        )))
    };

    // Cells in table order: O->V, O->QK, O->MLP, MLP->V, MLP->QK, MLP->MLP.
    let cells: [f64; 6] = match (q.granularity, q.variant, q.long_form) {
        (EdgeGranularity::MlpLayers, EdgeVariant::Base, false) => {
            [d * h * h, 2.0 * d * h * h, d * h, d * h, 2.0 * d * h, d]
        }
        (EdgeGranularity::MlpLayers, EdgeVariant::QkFix, false) => {
            [d * h * h, qk_short * d * h * h, d * h, d * h, qk_short * d * h, d]
        }
        (EdgeGranularity::MlpLayers, EdgeVariant::QkFixGradDrop, false) => [
            gd * d * h * h,
            gd * qk_short * d * h * h,
            gd * d * h,
            gd * d * h,
            gd * qk_short * d * h,
            gd * d,
        ],
        (EdgeGranularity::MlpLayers, EdgeVariant::Star, false) => {
            [d * h * h, qk_short * d * h * h, v * n * h, d * h, qk_short * d * h, n * d]
        }
        (EdgeGranularity::MlpLayers, EdgeVariant::StarGradDrop, false) => [
            gd * d * h * h,
            gd * qk_short * d * h * h,
            v * n * h,
            gd * d * h,
            gd * qk_short * d * h,
            n * d,
        ],
        (EdgeGranularity::MlpLayers, EdgeVariant::QkFix, true) => {
            [d * h * h, qk_long * d * h * h, d * h, d * h, qk_long * d * h, d]
        }
        (EdgeGranularity::MlpLayers, EdgeVariant::QkFixGradDrop, true) => [
            gd * d * h * h,
            gd * qk_long * d * h * h,
            gd * d * h,
            gd * d * h,
            gd * qk_long * d * h,
            gd * d,
        ],
        (EdgeGranularity::MlpLayers, EdgeVariant::Star, true) => {
            [d * h * h, qk_long * d * h * h, v * n * h, d * h, qk_long * d * h, n * d]
        }
        (EdgeGranularity::MlpLayers, EdgeVariant::StarGradDrop, true) => [
            gd * d * h * h,
            gd * qk_long * d * h * h,
            v * n * h,
            gd * d * h,
            gd * qk_long * d * h,
            n * d,
        ],
        (EdgeGranularity::Neurons, EdgeVariant::Base, false)
        | (EdgeGranularity::Neurons, EdgeVariant::MlpFix, false) => {
            [d * h * h, 2.0 * d * h * h, v * n * h, v * n * h, 2.0 * k * n * h, n * n]
        }
        (EdgeGranularity::Neurons, EdgeVariant::Star, false) => [
            d * h * h,
            qk_short * d * h * h,
            v * n * h,
            v * n * h,
            qk_short * k * n * h,
            n * n,
        ],
        (EdgeGranularity::Neurons, EdgeVariant::StarGradDrop, false) => [
            gd * d * h * h,
            gd * qk_short * d * h * h,
            v * n * h,
            gd * v * n * h,
            gd * qk_short * k * n * h,
            n * n,
        ],
        (EdgeGranularity::Neurons, EdgeVariant::Star, true) => [
            d * h * h,
            qk_long * d * h * h,
            v * n * h,
            v * n * h,
            qk_short * k * n * h,
            n * n,
        ],
        (EdgeGranularity::Neurons, EdgeVariant::StarGradDrop, true) => [
            gd * d * h * h,
            gd * qk_long * d * h * h,
            v * n * h,
            gd * v * n * h,
            gd * qk_short * k * n * h,
            n * n,
        ],
        _ => return unsupported(),
    };
    let layer_pairs = l * (l - 1.0) / 2.0;
    Ok(EdgeCostBreakdown {
        o_to_v: cells[0],
        o_to_qk: cells[1],
        o_to_mlp: cells[2],
        mlp_to_v: cells[3],
        mlp_to_qk: cells[4],
        mlp_to_mlp: cells[5],
        total: layer_pairs * cells.iter().sum::<f64>(),
    })
}

// ---------------------------------------------------------------------------
// Layer-norm toy error surfaces
// ---------------------------------------------------------------------------

/// Error magnitudes of the two linearizations of a layer-norm at a unit
/// clean activation, as a function of the patched activation expressed in
/// the clean direction (x) and an orthogonal direction (y >= 0):
/// the full linearization (gradient through the norm denominator) vs the
/// frozen-denominator variant.
pub fn layernorm_toy_errors(x: f64, y: f64) -> Result<(f64, f64)> {
    if x == 0.0 && y == 0.0 {
        return Err(Error::InvalidConfig(
            "layer-norm toy errors are undefined at the origin".to_string(),
        ));
    }
    if y < 0.0 {
        return Err(Error::InvalidConfig("orthogonal component must be >= 0".to_string()));
    }
    let r = (x * x + y * y).sqrt();
    let eps_atp = (2.0 + y * y - 2.0 * (x + y * y) / r).max(0.0).sqrt();
    let eps_frozen = (r - 1.0).abs();
    Ok((eps_atp, eps_frozen))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_curve_is_diagonal() {
        let truth = vec![5.0, 1.0, 3.0, 2.0];
        let curve = verified_recall_curve("oracle", &truth, &truth, 0.0, 1.0).unwrap();
        assert_eq!(curve.costs, vec![1.0, 2.0, 3.0, 4.0]);
        assert!((irwrgm(&curve, &curve).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reversed_estimates_pay_full_sweep_for_top_one() {
        let truth = vec![4.0, 3.0, 2.0, 1.0];
        let reversed = vec![1.0, 2.0, 3.0, 4.0];
        let curve = verified_recall_curve("worst", &reversed, &truth, 0.0, 1.0).unwrap();
        assert_eq!(curve.costs[0], 4.0);
    }

    #[test]
    fn curve_is_monotone_and_above_diagonal() {
        let truth = vec![0.9, 0.4, 0.7, 0.1, 0.5, 0.2];
        let est = vec![0.5, 0.45, 0.9, 0.0, 0.3, 0.6];
        let curve = verified_recall_curve("m", &est, &truth, 2.0, 1.0).unwrap();
        for (i, w) in curve.costs.windows(2).enumerate() {
            assert!(w[1] >= w[0], "not monotone at k={}", i + 1);
        }
        for (i, &c) in curve.costs.iter().enumerate() {
            assert!(c >= (i + 1) as f64);
        }
    }

    #[test]
    fn partial_recall_target_needs_fewer_passes() {
        let truth = vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];
        let est: Vec<f64> = truth.iter().rev().cloned().collect();
        let full = verified_recall_curve("f", &est, &truth, 0.0, 1.0).unwrap();
        let ninety = verified_recall_curve("n", &est, &truth, 0.0, 0.9).unwrap();
        for k in 0..truth.len() {
            assert!(ninety.costs[k] <= full.costs[k]);
        }
    }

    #[test]
    fn irwrgm_doubled_curve_is_two() {
        let oracle = CostCurve {
            method: "o".to_string(),
            estimation_cost: 0.0,
            costs: vec![1.0, 2.0, 3.0, 4.0],
        };
        let doubled = CostCurve {
            method: "d".to_string(),
            estimation_cost: 0.0,
            costs: vec![2.0, 4.0, 6.0, 8.0],
        };
        assert!((irwrgm(&doubled, &oracle).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn event_curve_uses_logged_costs() {
        let truth = vec![3.0, 1.0, 2.0];
        // Measure node 2, then 0, then 1, at costs 4, 5, 6.
        let events = vec![(2usize, 4u64), (0, 5), (1, 6)];
        let curve = recall_curve_from_events("it", &events, &truth, 1.0).unwrap();
        // k=1: need node 0, verified at cost 5. k=2: {0,2} done at 5.
        assert_eq!(curve.costs, vec![5.0, 5.0, 6.0]);
    }

    #[test]
    fn cancellation_ratio_examples() {
        assert_eq!(cancellation_ratio(&[2.0, -2.0]).unwrap(), 1.0);
        assert_eq!(cancellation_ratio(&[1.0, 3.0, 0.5]).unwrap(), 0.0);
        assert_eq!(cancellation_ratio(&[0.0, 0.0]).unwrap(), 0.0);
        // Invariant under positive scaling.
        let effects = [0.3, -0.8, 0.2, 0.5, -0.1];
        let a = cancellation_ratio(&effects).unwrap();
        let scaled: Vec<f64> = effects.iter().map(|v| v * 17.5).collect();
        let b = cancellation_ratio(&scaled).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&a));
    }

    fn base_query() -> EdgeCostQuery {
        EdgeCostQuery {
            granularity: EdgeGranularity::MlpLayers,
            variant: EdgeVariant::Base,
            long_form: false,
            d_resid: 512,
            heads: 8,
            d_key: 64,
            d_value: 64,
            d_neurons: 2048,
            layers: 6,
            tokens: 16,
        }
    }

    #[test]
    fn edge_cost_hand_computed_cells() {
        // Layer granularity, base: O->V = D*H^2.
        let c = edge_cost(&base_query()).unwrap();
        assert_eq!(c.o_to_v, 512.0 * 64.0);
        assert_eq!(c.mlp_to_mlp, 512.0);
        // Neuron granularity, base: MLP->MLP = N^2.
        let mut q = base_query();
        q.granularity = EdgeGranularity::Neurons;
        let c = edge_cost(&q).unwrap();
        assert_eq!(c.mlp_to_mlp, 2048.0 * 2048.0);
        // Layer granularity QK fix: MLP->QK = (T+1)*D*H.
        let mut q = base_query();
        q.variant = EdgeVariant::QkFix;
        let c = edge_cost(&q).unwrap();
        assert_eq!(c.mlp_to_qk, 17.0 * 512.0 * 8.0);
        // Total applies the layer-pair count.
        let per_pair = c.o_to_v + c.o_to_qk + c.o_to_mlp + c.mlp_to_v + c.mlp_to_qk + c.mlp_to_mlp;
        assert_eq!(c.total, 15.0 * per_pair);
    }

    #[test]
    fn edge_cost_rejects_undefined_rows() {
        let mut q = base_query();
        q.long_form = true; // base has no long form
        assert!(edge_cost(&q).is_err());
        let mut q = base_query();
        q.variant = EdgeVariant::MlpFix; // layer granularity has no MLP fix row
        assert!(edge_cost(&q).is_err());
        let mut q = base_query();
        q.layers = 1;
        assert!(edge_cost(&q).is_err());
    }

    #[test]
    fn edge_cost_gd_factor_and_long_form() {
        let mut q = base_query();
        q.variant = EdgeVariant::QkFix;
        let short = edge_cost(&q).unwrap();
        q.variant = EdgeVariant::QkFixGradDrop;
        let gd = edge_cost(&q).unwrap();
        let factor = (q.layers as f64 + 1.0) / 2.0;
        assert_eq!(gd.o_to_v, factor * short.o_to_v);
        assert_eq!(gd.o_to_qk, factor * short.o_to_qk);
        // Long form O->QK = (2D+T+1)*K*H^2.
        q.variant = EdgeVariant::QkFix;
        q.long_form = true;
        let long = edge_cost(&q).unwrap();
        assert_eq!(long.o_to_qk, (2.0 * 512.0 + 17.0) * 64.0 * 64.0);
    }

    #[test]
    fn layernorm_errors_match_examples() {
        let (a, f) = layernorm_toy_errors(1.0, 0.0).unwrap();
        assert!(a.abs() < 1e-12 && f.abs() < 1e-12);
        // Unit-norm patched activation: frozen variant is exact.
        let (_, f) = layernorm_toy_errors(0.6, 0.8).unwrap();
        assert!(f.abs() < 1e-12);
        assert!(layernorm_toy_errors(0.0, 0.0).is_err());
        assert!(layernorm_toy_errors(0.5, -0.1).is_err());
    }

    #[test]
    fn frozen_beats_full_linearization_at_low_cosine_similarity() {
        // Grid over x <= 1 with cosine similarity x/r < 1/2.
        for xi in -20..=20 {
            for yi in 1..=40 {
                let x = xi as f64 * 0.05;
                let y = yi as f64 * 0.1;
                let r = (x * x + y * y).sqrt();
                if x > 1.0 || x / r >= 0.5 {
                    continue;
                }
                let (eps_atp, eps_frozen) = layernorm_toy_errors(x, y).unwrap();
                assert!(
                    eps_frozen <= eps_atp + 1e-12,
                    "({x}, {y}): frozen {eps_frozen} > full {eps_atp}"
                );
            }
        }
    }
}
