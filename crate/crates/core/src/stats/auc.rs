//! ROC AUC (Mann-Whitney with midranks), average precision, and the DeLong
//! variance/covariance machinery for comparing correlated AUCs.

use super::{tier, Result, StatsError, TestResult};

/// 1-based midranks: tied values share the average of their rank range.
pub(crate) fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0f64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn split_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let m = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - m;
    if m == 0 || n == 0 {
        return Err(StatsError::UndefinedMetric(format!(
            "AUC needs both classes, got {m} positives and {n} negatives"
        )));
    }
    Ok((m, n))
}

/// Mann-Whitney AUC with midrank tie handling; ties count one half. The
/// value is the exact rational `num / 2mn` evaluated once in f64, so it is
/// invariant under strictly monotone score transforms and exactly
/// complementary under score negation.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StatsError::Contract(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let (m, n) = split_counts(labels)?;
    let ranks = midranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&r, _)| r).sum();
    // 2·R_pos and m(m+1) are exact integers in f64 at any realistic size
    let num = 2.0 * r_pos - (m * (m + 1)) as f64;
    Ok(num / (2 * m * n) as f64)
}

/// ROC curve vertices (FPR, TPR) from (0,0) to (1,1), one step per distinct
/// threshold, descending.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (m, n) = split_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        points.push((fp as f64 / n as f64, tp as f64 / m as f64));
        i = j + 1;
    }
    Ok(points)
}

/// Average precision: the precision-recall step integral
/// `Σ (R_k − R_{k−1})·P_k` over distinct thresholds in descending order.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(StatsError::Contract(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let m = labels.iter().filter(|&&l| l == 1).count();
    if m == 0 {
        return Err(StatsError::UndefinedMetric("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut ap = 0.0f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / m as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Structural components of the Mann-Whitney statistic: one placement
/// average per positive (V10) and per negative (V01).
#[derive(Debug, Clone)]
pub struct DelongComponents {
    pub auc: f64,
    pub v10: Vec<f64>,
    pub v01: Vec<f64>,
}

/// Midrank-based fast path: `V10_i = (T_i − TX_i)/n`, `V01_j = 1 − (T_j − TY_j)/m`
/// where T are combined midranks and TX/TY are within-class midranks.
pub fn delong_components(scores: &[f64], labels: &[u8]) -> Result<DelongComponents> {
    if scores.len() != labels.len() {
        return Err(StatsError::Contract(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let (m, n) = split_counts(labels)?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(&s, _)| s).collect();
    let combined = midranks(scores);
    let t_pos: Vec<f64> = combined.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&r, _)| r).collect();
    let t_neg: Vec<f64> = combined.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(&r, _)| r).collect();
    let tx = midranks(&pos);
    let ty = midranks(&neg);
    let v10: Vec<f64> = t_pos.iter().zip(&tx).map(|(&t, &x)| (t - x) / n as f64).collect();
    let v01: Vec<f64> = t_neg.iter().zip(&ty).map(|(&t, &y)| 1.0 - (t - y) / m as f64).collect();
    let auc = v10.iter().sum::<f64>() / m as f64;
    Ok(DelongComponents { auc, v10, v01 })
}

fn sample_var(values: &[f64], mean: f64) -> f64 {
    let k = values.len();
    if k < 2 {
        return 0.0;
    }
    values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1) as f64
}

fn sample_cov(a: &[f64], b: &[f64], ma: f64, mb: f64) -> f64 {
    let k = a.len();
    if k < 2 {
        return 0.0;
    }
    a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).sum::<f64>() / (k - 1) as f64
}

/// AUC and its DeLong sampling variance `S10/m + S01/n`.
pub fn delong_variance(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    let (m, n) = split_counts(labels)?;
    if m < 2 || n < 2 {
        return Err(StatsError::Degenerate(format!(
            "DeLong variance needs at least 2 of each class, got {m}/{n}"
        )));
    }
    let comps = delong_components(scores, labels)?;
    let s10 = sample_var(&comps.v10, comps.auc);
    let s01 = sample_var(&comps.v01, comps.auc);
    Ok((comps.auc, s10 / m as f64 + s01 / n as f64))
}

/// Two-sided normal p-value via the complementary error function.
pub(crate) fn two_sided_normal_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Paired DeLong test of two models scored on the same subjects:
/// `z = (AUC_A − AUC_B)/√(Var_A + Var_B − 2·Cov_AB)` with structural-
/// component covariance. A zero-variance difference yields p = 1.
pub fn delong_paired_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<TestResult> {
    if scores_a.len() != scores_b.len() || scores_a.len() != labels.len() {
        return Err(StatsError::Contract("paired DeLong needs equal-length inputs".into()));
    }
    let (m, n) = split_counts(labels)?;
    if m < 2 || n < 2 {
        return Err(StatsError::Degenerate(format!(
            "paired DeLong needs at least 2 of each class, got {m}/{n}"
        )));
    }
    let a = delong_components(scores_a, labels)?;
    let b = delong_components(scores_b, labels)?;
    let var_a = sample_var(&a.v10, a.auc) / m as f64 + sample_var(&a.v01, a.auc) / n as f64;
    let var_b = sample_var(&b.v10, b.auc) / m as f64 + sample_var(&b.v01, b.auc) / n as f64;
    let cov = sample_cov(&a.v10, &b.v10, a.auc, b.auc) / m as f64 + sample_cov(&a.v01, &b.v01, a.auc, b.auc) / n as f64;
    let var_diff = var_a + var_b - 2.0 * cov;
    let n_total = labels.len();
    let diff = a.auc - b.auc;
    if var_diff <= 1e-24 && diff.abs() <= 1e-12 {
        // identical scores: zero-variance difference, p = 1
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            method: "delong_paired".into(),
            n: n_total,
            tier: tier(1.0),
            degenerate: true,
        });
    }
    // floor the variance so an AUC gap with degenerate variance (perfect
    // separation) comes out as the limit: a huge finite z, p ~ 0
    let z = diff / var_diff.max(1e-24).sqrt();
    let p = two_sided_normal_p(z);
    Ok(TestResult {
        statistic: z,
        p_value: p,
        method: "delong_paired".into(),
        n: n_total,
        tier: tier(p),
        degenerate: var_diff <= 1e-24,
    })
}
