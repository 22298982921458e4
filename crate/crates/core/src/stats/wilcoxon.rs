//! Wilcoxon signed-rank test on paired absolute errors.
//!
//! Differences are `|err_A| − |err_B|` per subject; zeros are dropped and
//! absolute differences get midranks. For n ≤ 25 the two-sided p-value is
//! exact: the full 2^n sign-assignment null distribution is materialized by
//! convolving one rank at a time over doubled ranks (midranks are halves,
//! so doubling makes every achievable sum an integer), which yields exactly
//! the same distribution as literal enumeration. Larger n uses the normal
//! approximation with tie-corrected variance and continuity correction.

use super::{auc::two_sided_normal_p, tier, Result, StatsError, TestResult};

pub(crate) const EXACT_LIMIT: usize = 25;

fn abs_midranks(values: &[f64]) -> Vec<f64> {
    let abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).expect("finite differences"));
    let mut ranks = vec![0.0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p for the doubled-rank multiset: counts of achievable
/// W⁺ sums across all 2^n sign assignments, built by convolution.
fn exact_two_sided_p(ranks: &[f64], w_min: f64) -> f64 {
    let n = ranks.len();
    let doubled: Vec<usize> = ranks.iter().map(|&r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[s] = number of sign assignments with doubled W⁺ = s
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let threshold = (2.0 * w_min).round() as usize;
    let le: u64 = counts[..=threshold.min(total)].iter().sum();
    (2.0 * le as f64 / (1u64 << n) as f64).min(1.0)
}

/// Paired comparison of two models' absolute errors.
pub fn wilcoxon_signed_rank(errors_a: &[f64], errors_b: &[f64]) -> Result<TestResult> {
    if errors_a.len() != errors_b.len() {
        return Err(StatsError::Contract(format!(
            "paired errors differ in length: {} vs {}",
            errors_a.len(),
            errors_b.len()
        )));
    }
    if errors_a.is_empty() {
        return Err(StatsError::Contract("wilcoxon needs at least one pair".into()));
    }
    let diffs: Vec<f64> = errors_a.iter().zip(errors_b).map(|(&a, &b)| a.abs() - b.abs()).collect();
    wilcoxon_on_differences(&diffs)
}

/// The test proper, on precomputed paired differences.
pub(crate) fn wilcoxon_on_differences(diffs: &[f64]) -> Result<TestResult> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        // all differences zero: degenerate, p = 1 by convention
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            method: "wilcoxon_degenerate".into(),
            n: 0,
            tier: tier(1.0),
            degenerate: true,
        });
    }
    let ranks = abs_midranks(&nonzero);
    let w_plus: f64 = nonzero.iter().zip(&ranks).filter(|(&d, _)| d > 0.0).map(|(_, &r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    let w_min = w_plus.min(w_minus);

    if n <= EXACT_LIMIT {
        let p = exact_two_sided_p(&ranks, w_min);
        return Ok(TestResult {
            statistic: w_min,
            p_value: p,
            method: "wilcoxon_exact".into(),
            n,
            tier: tier(p),
            degenerate: false,
        });
    }

    // normal approximation with tie correction and continuity correction
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0f64;
    let mut sorted: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return Ok(TestResult {
            statistic: w_min,
            p_value: 1.0,
            method: "wilcoxon_normal".into(),
            n,
            tier: tier(1.0),
            degenerate: true,
        });
    }
    let d = w_plus - mean;
    let d_corrected = if d > 0.0 { d - 0.5 } else if d < 0.0 { d + 0.5 } else { 0.0 };
    let z = d_corrected / var.sqrt();
    let p = two_sided_normal_p(z).min(1.0);
    Ok(TestResult { statistic: w_min, p_value: p, method: "wilcoxon_normal".into(), n, tier: tier(p), degenerate: false })
}

/// Literal 2^n enumeration, re-exported for verification against the
/// convolution path.
pub fn wilcoxon_exact_enumeration_p(diffs: &[f64]) -> Option<f64> {
    crate::oracles::wilcoxon_exact_p_enumeration(diffs)
}
