//! Statistical diagnostics for subsampling estimates.
//!
//! The core question subsampling answers per node is "could the true effect
//! magnitude be at least theta even though we estimated it near zero?". We
//! answer it with a conservative Welch-style test: under the null hypothesis
//! |mu_in - mu_out| >= theta, the worst case places the signed difference at
//! +-theta, and the p-value is the larger of the two one-sided tail
//! probabilities of the observed difference under a Student-t reference with
//! Welch-Satterthwaite degrees of freedom.

use crate::baselines::SubsampleStats;
use crate::error::{Error, Result};

/// Regularized incomplete beta function I_x(a, b) via Lentz's continued
/// fraction, with the standard symmetry switch for convergence.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta parameters must be positive");
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    // ln B(a,b) front factor: x^a (1-x)^b / (a B(a,b)).
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
        + a * x.ln()
        + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() / a) * beta_cf(a, b, x)
    } else {
        1.0 - (ln_front.exp() / b) * beta_cf(b, a, 1.0 - x)
    }
}

/// Continued fraction for the incomplete beta (Lentz's method).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Gamma(x), x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    assert!(df > 0.0, "degrees of freedom must be positive");
    if t == 0.0 {
        return 0.5;
    }
    let x = df / (df + t * t);
    let tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Welch-Satterthwaite degrees of freedom for two samples.
fn welch_df(s1: f64, n1: f64, s2: f64, n2: f64) -> f64 {
    let v1 = s1 * s1 / n1;
    let v2 = s2 * s2 / n2;
    let num = (v1 + v2) * (v1 + v2);
    let den = v1 * v1 / (n1 - 1.0) + v2 * v2 / (n2 - 1.0);
    num / den
}

/// Two-sample Welch test of the null |mu_in - mu_out| >= theta given the
/// observed statistics of one node. Returns the worst-case (largest) p-value
/// over the two null boundary points +theta and -theta: the probability,
/// under a Student-t reference, of seeing an absolute difference as small as
/// observed or smaller. None if either side of the node's statistics is
/// undefined.
pub fn welch_p_value(stats: &SubsampleStats, node: usize, theta: f64) -> Result<Option<f64>> {
    if theta < 0.0 {
        return Err(Error::InvalidConfig("theta must be nonnegative".to_string()));
    }
    let (n1, n2) = (stats.count_in[node], stats.count_out[node]);
    if n1 < 2 || n2 < 2 {
        return Ok(None);
    }
    let diff = match stats.signed_estimate(node) {
        Some(d) => d,
        None => return Ok(None),
    };
    let se = match stats.standard_error(node) {
        Some(se) if se > 0.0 && se.is_finite() => se,
        _ => return Ok(None),
    };
    let df = welch_df(
        stats.s_in(node).unwrap(),
        n1 as f64,
        stats.s_out(node).unwrap(),
        n2 as f64,
    );
    if !df.is_finite() || df <= 0.0 {
        return Ok(None);
    }
    // P(|D| <= |diff|) when the true mean difference is at +-theta; the two
    // boundary points give the same value by symmetry in |diff|.
    let d = diff.abs();
    let p = student_t_cdf((d - theta) / se, df) - student_t_cdf((-d - theta) / se, df);
    Ok(Some(p.clamp(0.0, 1.0)))
}

/// Smallest effect magnitude theta* such that the Welch p-value for
/// "true effect >= theta*" drops to `alpha`: effects at or above theta* are
/// rejected at level alpha, so theta* bounds the size of a missed effect.
/// Found by bisection to 1e-3 relative accuracy (the p-value is
/// non-increasing in theta). None where the p-value itself is undefined, or
/// when even theta = 0 is already rejected.
pub fn false_negative_bound(
    stats: &SubsampleStats,
    node: usize,
    alpha: f64,
) -> Result<Option<f64>> {
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(Error::InvalidConfig("alpha must be in (0,1)".to_string()));
    }
    let p_at = |theta: f64| welch_p_value(stats, node, theta);
    let p0 = match p_at(0.0)? {
        Some(p) => p,
        None => return Ok(None),
    };
    if p0 <= alpha {
        return Ok(None);
    }
    // Bracket: grow theta geometrically until rejected.
    let se = stats.standard_error(node).unwrap();
    let mut hi = stats.signed_estimate(node).unwrap().abs().max(se);
    let mut lo = 0.0;
    for _ in 0..200 {
        match p_at(hi)? {
            Some(p) if p > alpha => {
                lo = hi;
                hi *= 2.0;
            }
            Some(_) => break,
            None => return Ok(None),
        }
    }
    for _ in 0..200 {
        if hi - lo <= 1e-3 * hi {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match p_at(mid)? {
            Some(p) if p > alpha => lo = mid,
            Some(_) => hi = mid,
            None => return Ok(None),
        }
    }
    Ok(Some(hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::subsample_estimate;
    use crate::synthetic::SyntheticAdditive;

    /// Quadrature oracle for the Student-t CDF: integrate the density with
    /// Simpson's rule from 0 outward and use symmetry.
    fn t_cdf_quadrature(t: f64, df: f64) -> f64 {
        let pdf = |x: f64| -> f64 {
            let ln_c = ln_gamma(0.5 * (df + 1.0))
                - ln_gamma(0.5 * df)
                - 0.5 * (df * std::f64::consts::PI).ln();
            (ln_c - 0.5 * (df + 1.0) * (1.0 + x * x / df).ln()).exp()
        };
        let a = 0.0;
        let b = t.abs();
        let steps = 20_000;
        let h = (b - a) / steps as f64;
        let mut acc = pdf(a) + pdf(b);
        for i in 1..steps {
            let x = a + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
        }
        let half = acc * h / 3.0;
        if t >= 0.0 {
            0.5 + half
        } else {
            0.5 - half
        }
    }

    #[test]
    fn t_cdf_is_half_at_zero_and_symmetric() {
        for df in [1.0, 3.0, 10.0, 47.5] {
            assert_eq!(student_t_cdf(0.0, df), 0.5);
            let p = student_t_cdf(1.3, df);
            let q = student_t_cdf(-1.3, df);
            assert!((p + q - 1.0).abs() < 1e-12, "df {df}");
        }
    }

    #[test]
    fn t_cdf_matches_quadrature() {
        for df in [1.0, 2.0, 5.0, 12.0, 100.0] {
            for t in [-4.0, -1.5, -0.3, 0.2, 0.9, 2.5, 6.0] {
                let got = student_t_cdf(t, df);
                let want = t_cdf_quadrature(t, df);
                assert!(
                    (got - want).abs() < 1e-6,
                    "t={t} df={df}: got {got}, quadrature {want}"
                );
            }
        }
    }

    #[test]
    fn incomplete_beta_edges_and_symmetry() {
        assert_eq!(regularized_incomplete_beta(2.0, 3.0, 0.0), 0.0);
        assert_eq!(regularized_incomplete_beta(2.0, 3.0, 1.0), 1.0);
        // I_x(a,b) = 1 - I_{1-x}(b,a)
        let x = 0.37;
        let lhs = regularized_incomplete_beta(2.5, 4.0, x);
        let rhs = 1.0 - regularized_incomplete_beta(4.0, 2.5, 1.0 - x);
        assert!((lhs - rhs).abs() < 1e-12);
        // I_x(1,1) = x
        assert!((regularized_incomplete_beta(1.0, 1.0, 0.42) - 0.42).abs() < 1e-12);
    }

    fn demo_stats() -> crate::baselines::SubsampleStats {
        let effects: Vec<f64> = (0..40).map(|i| if i == 0 { 0.0 } else { 0.02 }).collect();
        let o = SyntheticAdditive::single(effects);
        subsample_estimate(&o, 0.1, 400, 11).unwrap()
    }

    #[test]
    fn p_value_is_non_increasing_in_theta() {
        let stats = demo_stats();
        let mut prev = f64::INFINITY;
        for k in 0..60 {
            let theta = k as f64 * 0.01;
            let p = welch_p_value(&stats, 0, theta).unwrap().unwrap();
            assert!(
                p <= prev + 1e-12,
                "p-value increased at theta {theta}: {p} > {prev}"
            );
            prev = p;
        }
    }

    #[test]
    fn p_value_at_zero_theta_is_large_for_null_node() {
        let stats = demo_stats();
        // Node 0 has true effect 0: the null "effect >= 0" holds trivially.
        let p = welch_p_value(&stats, 0, 0.0).unwrap().unwrap();
        assert!(p > 0.0 && p <= 1.0);
        // A far-away theta should be decisively rejected.
        let p_far = welch_p_value(&stats, 0, 100.0).unwrap().unwrap();
        assert!(p_far < 1e-6, "p at huge theta: {p_far}");
    }

    #[test]
    fn false_negative_bound_brackets_alpha_crossing() {
        let stats = demo_stats();
        let alpha = 0.05;
        // Node 1 has a real (small) effect, so theta = 0 is not rejected.
        let theta = false_negative_bound(&stats, 1, alpha).unwrap().unwrap();
        let just_below = welch_p_value(&stats, 1, theta * 0.995).unwrap().unwrap();
        let at = welch_p_value(&stats, 1, theta).unwrap().unwrap();
        assert!(at <= alpha, "p({theta}) = {at} should be <= {alpha}");
        assert!(
            just_below >= alpha * 0.9,
            "bound too loose: p just below = {just_below}"
        );
    }

    #[test]
    fn undefined_statistics_yield_none() {
        let o = SyntheticAdditive::single(vec![1.0, 2.0]);
        let stats = subsample_estimate(&o, 1e-9, 3, 0).unwrap();
        assert!(welch_p_value(&stats, 0, 0.1).unwrap().is_none());
        assert!(false_negative_bound(&stats, 0, 0.05).unwrap().is_none());
    }

    #[test]
    fn invalid_parameters_error() {
        let stats = demo_stats();
        assert!(welch_p_value(&stats, 0, -1.0).is_err());
        assert!(false_negative_bound(&stats, 0, 0.0).is_err());
        assert!(false_negative_bound(&stats, 0, 1.0).is_err());
    }
}
