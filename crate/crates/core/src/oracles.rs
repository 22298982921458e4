//! Brute-force reference implementations used only for verification.
//!
//! Everything here recomputes a statistic by its definition, with no shared
//! code or shortcuts from the fast paths in [`crate::stats`]: AUC by
//! counting concordant pairs, DeLong structural components by the O(m·n)
//! placement loops, and the exact Wilcoxon null by literal enumeration of
//! all 2^n sign assignments. Tests and the acceptance suite compare the
//! production implementations against these.

/// ψ kernel of the Mann-Whitney statistic: 1 for a concordant pair, ½ for
/// a tie, 0 otherwise.
fn psi(pos: f64, neg: f64) -> f64 {
    if pos > neg {
        1.0
    } else if pos == neg {
        0.5
    } else {
        0.0
    }
}

/// AUC by averaging ψ over every (positive, negative) pair.
pub fn auc_pair_counting(scores: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(&s, _)| s).collect();
    let mut total = 0.0;
    for &p in &pos {
        for &n in &neg {
            total += psi(p, n);
        }
    }
    total / (pos.len() * neg.len()) as f64
}

/// DeLong structural components by their definition: `V10_i` averages ψ
/// over all negatives for positive i, `V01_j` over all positives for
/// negative j. Returns (AUC, V10, V01).
pub fn delong_components_brute_force(scores: &[f64], labels: &[u8]) -> (f64, Vec<f64>, Vec<f64>) {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(&s, _)| s).collect();
    let v10: Vec<f64> = pos.iter().map(|&p| neg.iter().map(|&n| psi(p, n)).sum::<f64>() / neg.len() as f64).collect();
    let v01: Vec<f64> = neg.iter().map(|&n| pos.iter().map(|&p| psi(p, n)).sum::<f64>() / pos.len() as f64).collect();
    let auc = v10.iter().sum::<f64>() / v10.len() as f64;
    (auc, v10, v01)
}

fn sample_var(values: &[f64], mean: f64) -> f64 {
    values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64
}

fn sample_cov(a: &[f64], b: &[f64], ma: f64, mb: f64) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

/// Two-sided paired DeLong p-value built entirely from the brute-force
/// components.
pub fn delong_paired_p_brute_force(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> f64 {
    let (auc_a, v10_a, v01_a) = delong_components_brute_force(scores_a, labels);
    let (auc_b, v10_b, v01_b) = delong_components_brute_force(scores_b, labels);
    let m = v10_a.len() as f64;
    let n = v01_a.len() as f64;
    let var_a = sample_var(&v10_a, auc_a) / m + sample_var(&v01_a, auc_a) / n;
    let var_b = sample_var(&v10_b, auc_b) / m + sample_var(&v01_b, auc_b) / n;
    let cov = sample_cov(&v10_a, &v10_b, auc_a, auc_b) / m + sample_cov(&v01_a, &v01_b, auc_a, auc_b) / n;
    let var_diff = var_a + var_b - 2.0 * cov;
    let diff = auc_a - auc_b;
    if var_diff <= 1e-24 && diff.abs() <= 1e-12 {
        return 1.0;
    }
    let z = diff / var_diff.max(1e-24).sqrt();
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Midranks of absolute values, reproduced here independently.
fn abs_midranks(diffs: &[f64]) -> Vec<f64> {
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap());
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

/// Exact two-sided signed-rank p-value by literal enumeration of all 2^n
/// sign assignments of the (zero-dropped) differences. Returns `None` when
/// every difference is zero.
pub fn wilcoxon_exact_p_enumeration(diffs: &[f64]) -> Option<f64> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    if n == 0 {
        return None;
    }
    assert!(n <= 25, "literal enumeration is limited to n <= 25");
    let ranks = abs_midranks(&nonzero);
    let w_plus_obs: f64 = nonzero.iter().zip(&ranks).filter(|(&d, _)| d > 0.0).map(|(_, &r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w_min_obs = w_plus_obs.min(total - w_plus_obs);
    let mut count_le = 0u64;
    for mask in 0u64..(1u64 << n) {
        let mut w_plus = 0.0f64;
        for (bit, &r) in ranks.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                w_plus += r;
            }
        }
        if w_plus <= w_min_obs {
            count_le += 1;
        }
    }
    Some((2.0 * count_le as f64 / (1u64 << n) as f64).min(1.0))
}
