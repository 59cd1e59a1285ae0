//! Synthetic intervention oracles with known ground truth.
//!
//! Used to validate the sampling and search baselines against closed-form
//! answers: per-node effects are chosen directly, set interventions are
//! additive by construction, and an optional pairwise-interaction term lets
//! tests measure estimator bias against its analytic value.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::patching::InterventionOracle;

/// Additive oracle: I(S; pair) = sum of per-node effects, plus an optional
/// sum of pairwise interaction terms over unordered node pairs within S.
pub struct SyntheticAdditive {
    /// effects[pair][node]
    effects: Vec<Vec<f64>>,
    weights: Vec<f64>,
    /// Unordered pairwise interactions, keyed by (min, max) node index;
    /// values are per-pair constants.
    interactions: HashMap<(usize, usize), Vec<f64>>,
    calls: AtomicU64,
}

impl SyntheticAdditive {
    /// Single-pair oracle from one effect vector.
    pub fn single(effects: Vec<f64>) -> Self {
        SyntheticAdditive {
            effects: vec![effects],
            weights: vec![1.0],
            interactions: HashMap::new(),
            calls: AtomicU64::new(0),
        }
    }

    /// Multi-pair oracle; `effects[pair][node]`. Uniform weights.
    pub fn with_pairs(effects: Vec<Vec<f64>>) -> Result<Self> {
        if effects.is_empty() || effects[0].is_empty() {
            return Err(Error::InvalidConfig("empty synthetic oracle".to_string()));
        }
        let n = effects[0].len();
        if effects.iter().any(|e| e.len() != n) {
            return Err(Error::InvalidConfig("ragged synthetic effects".to_string()));
        }
        let k = effects.len();
        Ok(SyntheticAdditive {
            effects,
            weights: vec![1.0 / k as f64; k],
            interactions: HashMap::new(),
            calls: AtomicU64::new(0),
        })
    }

    /// Add a constant interaction term between two nodes (same on all pairs).
    pub fn add_interaction(&mut self, a: usize, b: usize, sigma: f64) {
        assert_ne!(a, b);
        let key = (a.min(b), a.max(b));
        self.interactions.insert(key, vec![sigma; self.effects.len()]);
    }

    /// True contribution c(n) = |pair-weighted mean effect|.
    pub fn true_contribution(&self, node: usize) -> f64 {
        self.effects
            .iter()
            .zip(&self.weights)
            .map(|(e, w)| w * e[node])
            .sum::<f64>()
            .abs()
    }

    pub fn true_contributions(&self) -> Vec<f64> {
        (0..self.num_nodes()).map(|n| self.true_contribution(n)).collect()
    }

    /// Sum of interaction strengths of `node` with all other nodes, averaged
    /// over pairs: the analytic subsampling bias is p times this value.
    pub fn total_interaction(&self, node: usize) -> f64 {
        self.interactions
            .iter()
            .filter(|((a, b), _)| *a == node || *b == node)
            .map(|(_, sig)| {
                sig.iter().zip(&self.weights).map(|(s, w)| w * s).sum::<f64>()
            })
            .sum()
    }
}

impl InterventionOracle for SyntheticAdditive {
    fn num_nodes(&self) -> usize {
        self.effects[0].len()
    }

    fn num_pairs(&self) -> usize {
        self.effects.len()
    }

    fn pair_weight(&self, pair: usize) -> f64 {
        self.weights[pair]
    }

    fn intervene(&self, nodes: &[usize], pair: usize) -> f64 {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut acc: f64 = nodes.iter().map(|&n| self.effects[pair][n]).sum();
        if !self.interactions.is_empty() && nodes.len() > 1 {
            for (i, &a) in nodes.iter().enumerate() {
                for &b in &nodes[i + 1..] {
                    if let Some(sig) = self.interactions.get(&(a.min(b), a.max(b))) {
                        acc += sig[pair];
                    }
                }
            }
        }
        acc
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn additive_and_interaction_arithmetic() {
        let mut o = SyntheticAdditive::single(vec![1.0, 2.0, 3.0]);
        assert_eq!(o.intervene(&[0, 2], 0), 4.0);
        o.add_interaction(0, 2, 0.5);
        assert_eq!(o.intervene(&[0, 2], 0), 4.5);
        assert_eq!(o.intervene(&[0, 1], 0), 3.0);
        assert_eq!(o.total_interaction(0), 0.5);
        assert_eq!(o.calls(), 3);
    }

    #[test]
    fn contribution_is_weighted_mean_abs() {
        let o = SyntheticAdditive::with_pairs(vec![vec![2.0, -1.0], vec![-2.0, -3.0]]).unwrap();
        assert_eq!(o.true_contribution(0), 0.0);
        assert_eq!(o.true_contribution(1), 2.0);
    }
}
