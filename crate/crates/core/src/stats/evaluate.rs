//! Cohort evaluation reports and three-way model comparison with
//! Bonferroni-tiered significance markers.

use super::{
    auprc, delong_paired_test, delong_variance, pearson_r, roc_auc, tier, wilcoxon_signed_rank, PredictionRecord,
    Result, StatsError, TestResult,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

pub const EVAL_SCHEMA_VERSION: u32 = 1;
pub const PREDICTIONS_HEADER: &str = "subject_id,cohort,sex_true,sex_score,age_true,age_pred_raw,age_pred_corrected";

const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    pub bootstrap_seed: u64,
    pub bootstrap_samples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { bootstrap_seed: 7, bootstrap_samples: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SexMetrics {
    pub auc: f64,
    /// DeLong-variance normal interval, clipped to [0, 1].
    pub auc_ci: (f64, f64),
    pub auprc: f64,
    /// Seeded subject bootstrap, percentile 2.5/97.5.
    pub auprc_ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeMetrics {
    pub mae: f64,
    pub mae_ci: (f64, f64),
    pub pearson_r: f64,
    pub r_ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEval {
    pub name: String,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sex: Option<SexMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_raw: Option<AgeMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age_corrected: Option<AgeMetrics>,
    /// Reasons for absent cells, method remarks.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub model_a: String,
    pub model_b: String,
    pub result: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    /// Point estimate per model, in input order.
    pub points: Vec<f64>,
    /// Index of the best model by point estimate.
    pub best: usize,
    pub pairwise: Vec<PairResult>,
    /// Table-style marker per model: the tier of its test against the best
    /// model; the best model itself carries no marker.
    pub markers: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub models: Vec<String>,
    pub n_subjects: usize,
    pub metrics: Vec<MetricComparison>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub scheme: String,
    pub groups: Vec<CohortEval>,
}

/// The versioned top-level report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub task: String,
    pub bootstrap_seed: u64,
    pub cohorts: Vec<CohortEval>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subgroups: Option<SubgroupReport>,
    pub method_notes: Vec<String>,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    }
}

/// Percentile 2.5/97.5 interval over seeded subject resamples. Resamples on
/// which the metric is undefined (e.g. one class only) are skipped.
fn bootstrap_ci(
    n: usize,
    samples: usize,
    seed: u64,
    metric: impl Fn(&[usize]) -> Option<f64>,
) -> Option<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        if let Some(v) = metric(&idx) {
            values.push(v);
        }
    }
    if values.len() < samples / 2 {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some((percentile(&values, 0.025), percentile(&values, 0.975)))
}

/// AUC + AUPRC with intervals for one record set.
pub(crate) fn sex_metrics(records: &[&PredictionRecord], opts: &EvalOptions) -> Result<SexMetrics> {
    let mut scores = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        scores.push(r.sex_score.ok_or_else(|| {
            StatsError::Contract(format!("record {} has no sex_score", r.subject_id))
        })?);
        labels.push(r.sex_true);
    }
    let (auc, var) = delong_variance(&scores, &labels)?;
    let half = Z_95 * var.sqrt();
    let auc_ci = ((auc - half).max(0.0), (auc + half).min(1.0));
    let ap = auprc(&scores, &labels)?;
    let ap_ci = bootstrap_ci(records.len(), opts.bootstrap_samples, opts.bootstrap_seed, |idx| {
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        auprc(&s, &l).ok()
    })
    .ok_or_else(|| StatsError::Degenerate("too many degenerate bootstrap resamples for AUPRC".into()))?;
    Ok(SexMetrics { auc, auc_ci, auprc: ap, auprc_ci: ap_ci })
}

/// MAE + Pearson r with bootstrap intervals for one record set.
pub(crate) fn age_metrics(
    records: &[&PredictionRecord],
    predicted: impl Fn(&PredictionRecord) -> Option<f64>,
    opts: &EvalOptions,
) -> Result<AgeMetrics> {
    let mut preds = Vec::with_capacity(records.len());
    let mut truths = Vec::with_capacity(records.len());
    for r in records {
        preds.push(predicted(r).ok_or_else(|| {
            StatsError::Contract(format!("record {} has no age prediction", r.subject_id))
        })?);
        truths.push(r.age_true);
    }
    let n = records.len();
    let mae = preds.iter().zip(&truths).map(|(p, t)| (p - t).abs()).sum::<f64>() / n as f64;
    let r = pearson_r(&preds, &truths)?;
    let mae_ci = bootstrap_ci(n, opts.bootstrap_samples, opts.bootstrap_seed, |idx| {
        Some(idx.iter().map(|&i| (preds[i] - truths[i]).abs()).sum::<f64>() / idx.len() as f64)
    })
    .expect("mae defined on every resample");
    let r_ci = bootstrap_ci(n, opts.bootstrap_samples, opts.bootstrap_seed.wrapping_add(1), |idx| {
        let p: Vec<f64> = idx.iter().map(|&i| preds[i]).collect();
        let t: Vec<f64> = idx.iter().map(|&i| truths[i]).collect();
        pearson_r(&p, &t).ok()
    })
    .ok_or_else(|| StatsError::Degenerate("too many degenerate bootstrap resamples for pearson r".into()))?;
    Ok(AgeMetrics { mae, mae_ci, pearson_r: r, r_ci })
}

/// Task-appropriate metrics with confidence intervals for one cohort.
pub fn evaluate(name: &str, records: &[PredictionRecord], classification: bool, opts: &EvalOptions) -> CohortEval {
    let refs: Vec<&PredictionRecord> = records.iter().collect();
    let mut eval = CohortEval { name: name.to_string(), n: records.len(), sex: None, age_raw: None, age_corrected: None, notes: Vec::new() };
    if records.is_empty() {
        eval.notes.push("no records".into());
        return eval;
    }
    if classification {
        match sex_metrics(&refs, opts) {
            Ok(m) => eval.sex = Some(m),
            Err(e) => eval.notes.push(format!("sex metrics absent: {e}")),
        }
    } else {
        match age_metrics(&refs, |r| r.age_pred_raw, opts) {
            Ok(m) => eval.age_raw = Some(m),
            Err(e) => eval.notes.push(format!("raw age metrics absent: {e}")),
        }
        if refs.iter().all(|r| r.age_pred_corrected.is_some()) {
            match age_metrics(&refs, |r| r.age_pred_corrected, opts) {
                Ok(m) => eval.age_corrected = Some(m),
                Err(e) => eval.notes.push(format!("corrected age metrics absent: {e}")),
            }
        }
    }
    eval
}

fn check_same_subjects(models: &[(String, Vec<PredictionRecord>)]) -> Result<Vec<Vec<usize>>> {
    let reference: BTreeSet<&str> = models[0].1.iter().map(|r| r.subject_id.as_str()).collect();
    if reference.len() != models[0].1.len() {
        return Err(StatsError::Contract("duplicate subject ids in first model's records".into()));
    }
    for (name, records) in models.iter().skip(1) {
        let ids: BTreeSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
        if ids != reference {
            let missing: Vec<&&str> = reference.difference(&ids).take(5).collect();
            let extra: Vec<&&str> = ids.difference(&reference).take(5).collect();
            return Err(StatsError::Contract(format!(
                "model {name} subject set differs: missing {missing:?}, extra {extra:?}"
            )));
        }
    }
    // index orderings aligned to the sorted subject list
    let sorted: Vec<&str> = reference.into_iter().collect();
    let mut orders = Vec::with_capacity(models.len());
    for (_, records) in models {
        let mut order = Vec::with_capacity(sorted.len());
        for id in &sorted {
            order.push(records.iter().position(|r| r.subject_id == *id).expect("validated"));
        }
        orders.push(order);
    }
    Ok(orders)
}

/// Paired bootstrap two-sided test for an AUPRC difference; DeLong theory
/// does not cover average precision, so resampling stands in for it.
fn auprc_paired_bootstrap(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[u8],
    opts: &EvalOptions,
) -> Result<TestResult> {
    let n = labels.len();
    let point = auprc(scores_a, labels)? - auprc(scores_b, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.bootstrap_seed.wrapping_add(2));
    let mut le = 0u64;
    let mut ge = 0u64;
    let mut valid = 0u64;
    for _ in 0..opts.bootstrap_samples {
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let sa: Vec<f64> = idx.iter().map(|&i| scores_a[i]).collect();
        let sb: Vec<f64> = idx.iter().map(|&i| scores_b[i]).collect();
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let (Ok(pa), Ok(pb)) = (auprc(&sa, &l), auprc(&sb, &l)) else { continue };
        let d = pa - pb;
        if d <= 0.0 {
            le += 1;
        }
        if d >= 0.0 {
            ge += 1;
        }
        valid += 1;
    }
    if valid < opts.bootstrap_samples as u64 / 2 {
        return Err(StatsError::Degenerate("too many degenerate resamples in AUPRC bootstrap".into()));
    }
    let p = (2.0 * ((le.min(ge) + 1) as f64) / ((valid + 1) as f64)).min(1.0);
    let degenerate = le == valid && ge == valid;
    let p = if degenerate { 1.0 } else { p };
    Ok(TestResult {
        statistic: point,
        p_value: p,
        method: "auprc_paired_bootstrap".into(),
        n,
        tier: tier(p),
        degenerate,
    })
}

/// Pairwise comparison of models scored on identical subjects: DeLong for
/// AUC, paired bootstrap for AUPRC, Wilcoxon on absolute errors for MAE.
/// Markers express each model's underperformance against the best model of
/// that metric.
pub fn compare_models(
    models: &[(String, Vec<PredictionRecord>)],
    classification: bool,
    opts: &EvalOptions,
) -> Result<ComparisonReport> {
    if models.len() < 2 {
        return Err(StatsError::Contract("model comparison needs at least two models".into()));
    }
    let orders = check_same_subjects(models)?;
    let n = models[0].1.len();
    let names: Vec<String> = models.iter().map(|(n, _)| n.clone()).collect();
    let mut notes = Vec::new();
    let mut metrics = Vec::new();

    if classification {
        let mut scores: Vec<Vec<f64>> = Vec::new();
        for ((_, records), order) in models.iter().zip(&orders) {
            let mut s = Vec::with_capacity(n);
            for &i in order {
                s.push(records[i].sex_score.ok_or_else(|| {
                    StatsError::Contract(format!("record {} has no sex_score", records[i].subject_id))
                })?);
            }
            scores.push(s);
        }
        let labels: Vec<u8> = orders[0].iter().map(|&i| models[0].1[i].sex_true).collect();

        let aucs: Vec<f64> = scores.iter().map(|s| roc_auc(s, &labels)).collect::<Result<_>>()?;
        metrics.push(build_metric("auc", &names, aucs, true, |a, b| {
            delong_paired_test(&scores[a], &scores[b], &labels)
        })?);
        let aps: Vec<f64> = scores.iter().map(|s| auprc(s, &labels)).collect::<Result<_>>()?;
        metrics.push(build_metric("auprc", &names, aps, true, |a, b| {
            auprc_paired_bootstrap(&scores[a], &scores[b], &labels, opts)
        })?);
        notes.push(
            "auprc significance uses a paired bootstrap (DeLong theory covers AUC only); method diverges from the AUC column".to_string(),
        );
    } else {
        let use_corrected = models.iter().all(|(_, records)| records.iter().all(|r| r.age_pred_corrected.is_some()));
        let field = if use_corrected {
            notes.push("age comparison uses bias-corrected predictions".to_string());
            |r: &PredictionRecord| r.age_pred_corrected
        } else {
            notes.push("age comparison uses raw predictions (corrected not present for every model)".to_string());
            |r: &PredictionRecord| r.age_pred_raw
        };
        let mut errors: Vec<Vec<f64>> = Vec::new();
        for ((_, records), order) in models.iter().zip(&orders) {
            let mut e = Vec::with_capacity(n);
            for &i in order {
                let pred = field(&records[i]).ok_or_else(|| {
                    StatsError::Contract(format!("record {} has no age prediction", records[i].subject_id))
                })?;
                e.push(pred - records[i].age_true);
            }
            errors.push(e);
        }
        let maes: Vec<f64> =
            errors.iter().map(|e| e.iter().map(|v| v.abs()).sum::<f64>() / n as f64).collect();
        metrics.push(build_metric("mae", &names, maes, false, |a, b| {
            wilcoxon_signed_rank(&errors[a], &errors[b])
        })?);
    }

    Ok(ComparisonReport { models: names, n_subjects: n, metrics, notes })
}

fn build_metric(
    metric: &str,
    names: &[String],
    points: Vec<f64>,
    higher_is_better: bool,
    mut test: impl FnMut(usize, usize) -> Result<TestResult>,
) -> Result<MetricComparison> {
    let best = (0..points.len())
        .reduce(|a, b| {
            let better = if higher_is_better { points[b] > points[a] } else { points[b] < points[a] };
            if better {
                b
            } else {
                a
            }
        })
        .expect("non-empty");
    let mut pairwise = Vec::new();
    let mut table = vec![vec![None::<TestResult>; names.len()]; names.len()];
    for a in 0..names.len() {
        for b in a + 1..names.len() {
            let result = test(a, b)?;
            table[a][b] = Some(result.clone());
            table[b][a] = Some(result.clone());
            pairwise.push(PairResult { model_a: names[a].clone(), model_b: names[b].clone(), result });
        }
    }
    let markers: Vec<Option<String>> = (0..names.len())
        .map(|i| {
            if i == best {
                None
            } else {
                table[i][best].as_ref().map(|t| t.tier.marker().to_string())
            }
        })
        .collect();
    Ok(MetricComparison { metric: metric.to_string(), points, best, pairwise, markers })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.subject_id,
            r.cohort,
            r.sex_true,
            fmt_opt(r.sex_score),
            r.age_true,
            fmt_opt(r.age_pred_raw),
            fmt_opt(r.age_pred_corrected),
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == PREDICTIONS_HEADER => {}
        other => {
            return Err(StatsError::Predictions(format!(
                "header {:?} must be {PREDICTIONS_HEADER:?}",
                other.unwrap_or("")
            )))
        }
    }
    let parse_opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| StatsError::Predictions(format!("line {line}: bad number {s:?}")))
        }
    };
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(StatsError::Predictions(format!("line {}: expected 7 fields, got {}", i + 2, f.len())));
        }
        let sex_true: u8 = f[2]
            .parse()
            .map_err(|_| StatsError::Predictions(format!("line {}: bad sex_true {:?}", i + 2, f[2])))?;
        if sex_true > 1 {
            return Err(StatsError::Predictions(format!("line {}: sex_true must be 0 or 1", i + 2)));
        }
        let age_true: f64 = f[4]
            .parse()
            .map_err(|_| StatsError::Predictions(format!("line {}: bad age_true {:?}", i + 2, f[4])))?;
        if !age_true.is_finite() {
            return Err(StatsError::Predictions(format!("line {}: non-finite age", i + 2)));
        }
        records.push(PredictionRecord {
            subject_id: f[0].to_string(),
            cohort: f[1].to_string(),
            sex_true,
            sex_score: parse_opt(f[3], i + 2)?,
            age_true,
            age_pred_raw: parse_opt(f[5], i + 2)?,
            age_pred_corrected: parse_opt(f[6], i + 2)?,
        });
    }
    Ok(records)
}
