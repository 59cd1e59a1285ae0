//! Non-gradient baselines: Iterative, Subsampling, Blocks, and Hierarchical.
//!
//! All four are generic over [`InterventionOracle`] so they run identically
//! against the real patch engine and the synthetic oracles used to test
//! them. Costs are counted in intervention calls, which for the real engine
//! are forward passes; accounting is exact.
//!
//! Determinism: every source of randomness is an explicitly seeded ChaCha8
//! stream, and all rankings break ties by descending value then ascending
//! node index.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::atp::rank_descending;
use crate::error::{Error, Result};
use crate::patching::InterventionOracle;

/// One exactly-measured node: every value reported by the search baselines is
/// a true single-node intervention, never an estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerificationEvent {
    pub node: usize,
    /// |I({node})| on the method's pair (or c(n) when the method verifies
    /// against the full distribution).
    pub value: f64,
    /// Total intervention calls spent when this measurement completed.
    pub cost_after: u64,
}

/// Output of the budgeted search baselines.
#[derive(Clone, Debug, Default)]
pub struct RankResult {
    /// Exactly-measured nodes in measurement order.
    pub events: Vec<VerificationEvent>,
    /// Partial per-node table: measured value or None.
    pub values: Vec<Option<f64>>,
    pub calls_used: u64,
}

/// Sample a pair index by weight using one uniform draw.
fn sample_pair<O: InterventionOracle + ?Sized>(oracle: &O, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for i in 0..oracle.num_pairs() {
        acc += oracle.pair_weight(i);
        if u < acc {
            return i;
        }
    }
    oracle.num_pairs() - 1
}

// ---------------------------------------------------------------------------
// Iterative
// ---------------------------------------------------------------------------

/// Exhaustive patching in an uninformed random order (single pair), or the
/// two-phase variant on distributions: each phase measures one new pair per
/// unverified node, then fully verifies the top |N|/|D| (at least 1) nodes by
/// running mean of observed effect magnitudes.
pub fn iterative_rank<O: InterventionOracle + ?Sized>(
    oracle: &O,
    budget: u64,
    seed: u64,
) -> Result<RankResult> {
    let n = oracle.num_nodes();
    let d = oracle.num_pairs();
    let mut result = RankResult { values: vec![None; n], ..Default::default() };
    let mut spent: u64 = 0;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    if d == 1 {
        for &node in &order {
            if spent >= budget {
                break;
            }
            let v = oracle.intervene(&[node], 0).abs();
            spent += 1;
            result.values[node] = Some(v);
            result.events.push(VerificationEvent { node, value: v, cost_after: spent });
        }
        result.calls_used = spent;
        return Ok(result);
    }

    // Distribution mode.
    let mut measured_count = vec![0usize; n];
    let mut abs_sum = vec![0.0f64; n];
    let mut verified = vec![false; n];
    let per_phase = (n / d).max(1);
    'outer: loop {
        // Phase (i): one new pair measurement per unverified node.
        let mut progressed = false;
        for &node in &order {
            if verified[node] || measured_count[node] >= d {
                continue;
            }
            if spent >= budget {
                break 'outer;
            }
            let v = oracle.intervene(&[node], measured_count[node]);
            spent += 1;
            abs_sum[node] += v.abs();
            measured_count[node] += 1;
            progressed = true;
        }
        // Phase (ii): verify the top nodes by running mean magnitude.
        let means: Vec<f64> = (0..n)
            .map(|i| {
                if verified[i] || measured_count[i] == 0 {
                    f64::NEG_INFINITY
                } else {
                    abs_sum[i] / measured_count[i] as f64
                }
            })
            .collect();
        let ranked = rank_descending(&means);
        let mut taken = 0;
        for &node in &ranked {
            if taken == per_phase {
                break;
            }
            if verified[node] || means[node] == f64::NEG_INFINITY {
                continue;
            }
            if spent + d as u64 > budget {
                break 'outer;
            }
            let mut acc = 0.0;
            for pair in 0..d {
                acc += oracle.pair_weight(pair) * oracle.intervene(&[node], pair);
            }
            spent += d as u64;
            let c = acc.abs();
            verified[node] = true;
            result.values[node] = Some(c);
            result.events.push(VerificationEvent { node, value: c, cost_after: spent });
            taken += 1;
        }
        if !progressed && taken == 0 {
            break;
        }
        if verified.iter().all(|&v| v) {
            break;
        }
    }
    result.calls_used = spent;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Subsampling
// ---------------------------------------------------------------------------

/// Per-node running statistics from masked set interventions.
#[derive(Clone, Debug)]
pub struct SubsampleStats {
    pub count_in: Vec<u64>,
    pub count_out: Vec<u64>,
    pub sum_in: Vec<f64>,
    pub sum_out: Vec<f64>,
    pub sumsq_in: Vec<f64>,
    pub sumsq_out: Vec<f64>,
    pub num_samples: u64,
}

impl SubsampleStats {
    fn new(n: usize) -> Self {
        SubsampleStats {
            count_in: vec![0; n],
            count_out: vec![0; n],
            sum_in: vec![0.0; n],
            sum_out: vec![0.0; n],
            sumsq_in: vec![0.0; n],
            sumsq_out: vec![0.0; n],
            num_samples: 0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.count_in.len()
    }

    pub fn mean_in(&self, node: usize) -> Option<f64> {
        (self.count_in[node] > 0).then(|| self.sum_in[node] / self.count_in[node] as f64)
    }

    pub fn mean_out(&self, node: usize) -> Option<f64> {
        (self.count_out[node] > 0).then(|| self.sum_out[node] / self.count_out[node] as f64)
    }

    /// Sample standard deviation of the masked-in measurements.
    pub fn s_in(&self, node: usize) -> Option<f64> {
        sample_std(self.count_in[node], self.sum_in[node], self.sumsq_in[node])
    }

    pub fn s_out(&self, node: usize) -> Option<f64> {
        sample_std(self.count_out[node], self.sum_out[node], self.sumsq_out[node])
    }

    /// The subsampling estimate |mean_in - mean_out|; None (undefined) if the
    /// node never landed on one of the two sides.
    pub fn estimate(&self, node: usize) -> Option<f64> {
        Some((self.mean_in(node)? - self.mean_out(node)?).abs())
    }

    /// Signed difference mean_in - mean_out.
    pub fn signed_estimate(&self, node: usize) -> Option<f64> {
        Some(self.mean_in(node)? - self.mean_out(node)?)
    }

    /// Predicted standard error of the signed estimate.
    pub fn standard_error(&self, node: usize) -> Option<f64> {
        let si = self.s_in(node)?;
        let so = self.s_out(node)?;
        Some(
            (si * si / self.count_in[node] as f64 + so * so / self.count_out[node] as f64).sqrt(),
        )
    }
}

fn sample_std(count: u64, sum: f64, sumsq: f64) -> Option<f64> {
    if count < 2 {
        return None;
    }
    let n = count as f64;
    let mean = sum / n;
    let var = ((sumsq - n * mean * mean) / (n - 1.0)).max(0.0);
    Some(var.sqrt())
}

/// Algorithm: per sample, draw a prompt pair by weight and an i.i.d.
/// Bernoulli(p) node mask, measure the masked set jointly, and accumulate the
/// measurement into in/out statistics of every node. Each sample's RNG is an
/// independent stream derived from (seed, sample index), so results are
/// reproducible and independent of evaluation order; accumulation is in
/// sample order.
pub fn subsample_estimate<O: InterventionOracle + ?Sized>(
    oracle: &O,
    p: f64,
    num_samples: usize,
    seed: u64,
) -> Result<SubsampleStats> {
    if !(0.0..1.0).contains(&p) || p <= 0.0 {
        return Err(Error::InvalidConfig(format!("subsampling p must be in (0,1), got {p}")));
    }
    if num_samples < 2 {
        return Err(Error::InvalidConfig("subsampling needs at least 2 samples".to_string()));
    }
    let n = oracle.num_nodes();
    let mut stats = SubsampleStats::new(n);
    let mut mask_nodes: Vec<usize> = Vec::new();
    let mut mask = vec![false; n];
    for k in 0..num_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let pair = sample_pair(oracle, &mut rng);
        mask_nodes.clear();
        for (node, m) in mask.iter_mut().enumerate() {
            *m = rng.gen::<f64>() < p;
            if *m {
                mask_nodes.push(node);
            }
        }
        let value = oracle.intervene(&mask_nodes, pair);
        for node in 0..n {
            if mask[node] {
                stats.count_in[node] += 1;
                stats.sum_in[node] += value;
                stats.sumsq_in[node] += value * value;
            } else {
                stats.count_out[node] += 1;
                stats.sum_out[node] += value;
                stats.sumsq_out[node] += value * value;
            }
        }
        stats.num_samples += 1;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct BlocksConfig {
    pub block_size: usize,
    pub budget: u64,
    pub seed: u64,
}

/// Default block-size grid.
pub const BLOCK_SIZE_GRID: [usize; 5] = [2, 6, 20, 60, 250];

/// Shuffle-assign nodes to balanced groups: assignment[i] is the group of
/// node i.
fn shuffled_assignment(n: usize, groups: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut slots: Vec<usize> = (0..n).map(|i| groups * i / n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        slots.swap(i, j);
    }
    slots
}

/// Fixed-size block search on one prompt pair: measure every block once, then
/// walk blocks in decreasing |contribution| measuring individual nodes until
/// the budget runs out.
pub fn blocks_rank<O: InterventionOracle + ?Sized>(
    oracle: &O,
    pair: usize,
    cfg: &BlocksConfig,
) -> Result<RankResult> {
    let n = oracle.num_nodes();
    if cfg.block_size == 0 {
        return Err(Error::InvalidConfig("block size must be >= 1".to_string()));
    }
    let num_blocks = n.div_ceil(cfg.block_size);
    if cfg.budget < num_blocks as u64 {
        return Err(Error::BudgetTooSmall { budget: cfg.budget, required: num_blocks as u64 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let assignment = shuffled_assignment(n, num_blocks, &mut rng);
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); num_blocks];
    for (node, &b) in assignment.iter().enumerate() {
        blocks[b].push(node);
    }

    let mut result = RankResult { values: vec![None; n], ..Default::default() };
    let mut spent: u64 = 0;
    let contributions: Vec<f64> = blocks
        .iter()
        .map(|members| {
            spent += 1;
            oracle.intervene(members, pair).abs()
        })
        .collect();

    for &b in &rank_descending(&contributions) {
        for &node in &blocks[b] {
            if spent >= cfg.budget {
                result.calls_used = spent;
                return Ok(result);
            }
            let v = oracle.intervene(&[node], pair).abs();
            spent += 1;
            result.values[node] = Some(v);
            result.events.push(VerificationEvent { node, value: v, cost_after: spent });
        }
    }
    result.calls_used = spent;
    Ok(result)
}

// ---------------------------------------------------------------------------
// Hierarchical
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct HierarchicalConfig {
    /// Branching factor, >= 2.
    pub branching: usize,
    /// Number of sub-top levels, in [2, 12].
    pub levels: usize,
    pub budget: u64,
    pub seed: u64,
}

impl Default for HierarchicalConfig {
    fn default() -> Self {
        HierarchicalConfig { branching: 3, levels: 4, budget: u64::MAX, seed: 0 }
    }
}

struct QueueItem {
    priority: f64,
    prefix: Vec<usize>,
}

impl PartialEq for QueueItem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}
impl Eq for QueueItem {}
impl PartialOrd for QueueItem {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueItem {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // Max-heap on priority; ties pop the lexicographically smaller prefix.
        self.priority
            .partial_cmp(&other.priority)
            .unwrap()
            .then_with(|| other.prefix.cmp(&self.prefix))
    }
}

/// Recursive block search: nodes get base-B addresses under shuffled
/// top-level assignment; a priority queue (top-level blocks seeded at +inf)
/// pops the highest-priority block, measures it, and either records a
/// singleton or pushes its nonempty children clamped to
/// min(parent priority, own |contribution|).
pub fn hierarchical_rank<O: InterventionOracle + ?Sized>(
    oracle: &O,
    pair: usize,
    cfg: &HierarchicalConfig,
) -> Result<RankResult> {
    if cfg.branching < 2 {
        return Err(Error::InvalidConfig("branching factor must be >= 2".to_string()));
    }
    if !(2..=12).contains(&cfg.levels) {
        return Err(Error::InvalidConfig("levels must be in [2, 12]".to_string()));
    }
    if cfg.budget == 0 {
        return Err(Error::InvalidConfig("budget must be >= 1".to_string()));
    }
    let n = oracle.num_nodes();
    let b = cfg.branching;
    let cap = b
        .checked_pow(cfg.levels as u32)
        .ok_or_else(|| Error::InvalidConfig("branching^levels overflows".to_string()))?;
    let num_top = n.div_ceil(cap);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut slots: Vec<usize> = (0..n).map(|i| num_top * i * cap / n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        slots.swap(i, j);
    }
    // Address: (top-level block, L base-B digits, most significant first).
    let address = |slot: usize| -> Vec<usize> {
        let mut addr = vec![slot / cap];
        let mut rem = slot % cap;
        let mut digits = vec![0usize; cfg.levels];
        for d in (0..cfg.levels).rev() {
            digits[d] = rem % b;
            rem /= b;
        }
        addr.extend(digits);
        addr
    };
    let addresses: Vec<Vec<usize>> = slots.iter().map(|&s| address(s)).collect();

    let mut queue = BinaryHeap::new();
    for i in 0..num_top {
        queue.push(QueueItem { priority: f64::INFINITY, prefix: vec![i] });
    }

    let mut result = RankResult { values: vec![None; n], ..Default::default() };
    let mut spent: u64 = 0;
    while let Some(item) = queue.pop() {
        let members: Vec<usize> = (0..n)
            .filter(|&i| addresses[i].starts_with(&item.prefix))
            .collect();
        debug_assert!(!members.is_empty());
        let contribution = oracle.intervene(&members, pair).abs();
        spent += 1;
        if members.len() == 1 {
            let node = members[0];
            result.values[node] = Some(contribution);
            result.events.push(VerificationEvent { node, value: contribution, cost_after: spent });
        } else {
            for child in 0..b {
                let mut prefix = item.prefix.clone();
                prefix.push(child);
                if (0..n).any(|i| addresses[i].starts_with(&prefix)) {
                    queue.push(QueueItem {
                        priority: contribution.min(item.priority),
                        prefix,
                    });
                }
            }
        }
        if spent >= cfg.budget {
            break;
        }
    }
    result.calls_used = spent;
    Ok(result)
}
