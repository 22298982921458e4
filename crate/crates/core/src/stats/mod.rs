//! Metrics, paired significance tests, bias correction and subgroup
//! stratification for model evaluation and comparison.

mod auc;
mod evaluate;
mod wilcoxon;

pub use auc::{auprc, delong_components, delong_paired_test, delong_variance, roc_auc, roc_points, DelongComponents};
pub use evaluate::{
    compare_models, evaluate, read_predictions, write_predictions, AgeMetrics, CohortEval, ComparisonReport,
    EvalOptions, EvalReport, SexMetrics, SubgroupReport, EVAL_SCHEMA_VERSION, PREDICTIONS_HEADER,
};
pub use wilcoxon::{wilcoxon_exact_enumeration_p, wilcoxon_signed_rank};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("prediction file error: {0}")]
    Predictions(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// One subject's labels and model outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub subject_id: String,
    pub cohort: String,
    /// 1 = female, 0 = male.
    pub sex_true: u8,
    /// Probability or logit; every consumer here is rank-based, and the
    /// CLI always emits probabilities.
    pub sex_score: Option<f64>,
    pub age_true: f64,
    pub age_pred_raw: Option<f64>,
    pub age_pred_corrected: Option<f64>,
}

/// Linear age-bias model `pred ≈ slope·true + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasModel {
    pub slope: f64,
    pub intercept: f64,
    pub fit_tag: FitTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitTag {
    Validation,
    InSample,
}

const SLOPE_TOLERANCE: f64 = 1e-8;

/// Least-squares fit of predicted age against true age.
pub fn fit_bias_model(pred_age: &[f64], true_age: &[f64], fit_tag: FitTag) -> Result<BiasModel> {
    if pred_age.len() != true_age.len() {
        return Err(StatsError::Contract(format!(
            "paired inputs differ in length: {} vs {}",
            pred_age.len(),
            true_age.len()
        )));
    }
    let n = pred_age.len();
    if n < 3 {
        return Err(StatsError::Degenerate(format!("bias fit needs at least 3 pairs, got {n}")));
    }
    let nf = n as f64;
    let mx = true_age.iter().sum::<f64>() / nf;
    let my = pred_age.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in true_age.iter().zip(pred_age) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx <= 0.0 {
        return Err(StatsError::Degenerate("true ages have zero variance".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if slope.abs() <= SLOPE_TOLERANCE {
        return Err(StatsError::Degenerate(format!("fitted slope {slope} too close to zero to invert")));
    }
    Ok(BiasModel { slope, intercept, fit_tag })
}

/// Invert the fitted relation: `corrected = (pred − intercept)/slope`.
pub fn apply_bias_correction(model: &BiasModel, pred_age: &[f64]) -> Result<Vec<f64>> {
    if model.slope.abs() <= SLOPE_TOLERANCE {
        return Err(StatsError::Degenerate(format!("slope {} too close to zero", model.slope)));
    }
    Ok(pred_age.iter().map(|&p| (p - model.intercept) / model.slope).collect())
}

/// Product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(StatsError::Contract(format!("pearson needs paired n >= 2, got {} and {}", x.len(), y.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(StatsError::UndefinedMetric("pearson r undefined for zero variance".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Bonferroni-adjusted significance level `alpha / k`.
pub fn bonferroni(alpha: f64, k: usize) -> f64 {
    assert!(k >= 1, "bonferroni needs k >= 1");
    alpha / k as f64
}

/// Significance markers at the comparison table's fixed thresholds:
/// `§` not significant, then `*`, `**`, `***` at p < 0.017, 0.003, 0.0003.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "\u{a7}")]
    NotSignificant,
    #[serde(rename = "*")]
    Significant,
    #[serde(rename = "**")]
    Strong,
    #[serde(rename = "***")]
    VeryStrong,
}

impl Tier {
    pub fn marker(self) -> &'static str {
        match self {
            Tier::NotSignificant => "\u{a7}",
            Tier::Significant => "*",
            Tier::Strong => "**",
            Tier::VeryStrong => "***",
        }
    }
}

pub fn tier(p: f64) -> Tier {
    if p < 0.0003 {
        Tier::VeryStrong
    } else if p < 0.003 {
        Tier::Strong
    } else if p < 0.017 {
        Tier::Significant
    } else {
        Tier::NotSignificant
    }
}

/// Outcome of one paired statistical test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: String,
    pub n: usize,
    pub tier: Tier,
    /// Set when the inputs made the test degenerate (identical scores).
    pub degenerate: bool,
}

/// Age bins used by the subgroup analysis: [40,50), [50,60), [60,70].
pub const AGE_BIN_NAMES: [&str; 3] = ["40-50", "50-60", "60-70"];
pub const OUT_OF_RANGE_BIN: &str = "out_of_range";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StratifyScheme {
    AgeBins,
    Sex,
}

/// Partition records into named subgroups. Age 50 goes to the second bin,
/// 60 to the third, 70 is included (closed top); anything outside [40, 70]
/// lands in `out_of_range`.
pub fn stratify(records: &[PredictionRecord], scheme: StratifyScheme) -> Result<Vec<(String, Vec<&PredictionRecord>)>> {
    if records.is_empty() {
        return Err(StatsError::Contract("stratify needs at least one record".into()));
    }
    match scheme {
        StratifyScheme::AgeBins => {
            let mut bins: Vec<(String, Vec<&PredictionRecord>)> =
                AGE_BIN_NAMES.iter().map(|n| (n.to_string(), Vec::new())).collect();
            let mut out_of_range: Vec<&PredictionRecord> = Vec::new();
            for r in records {
                let a = r.age_true;
                if !(40.0..=70.0).contains(&a) {
                    out_of_range.push(r);
                } else if a < 50.0 {
                    bins[0].1.push(r);
                } else if a < 60.0 {
                    bins[1].1.push(r);
                } else {
                    bins[2].1.push(r);
                }
            }
            if !out_of_range.is_empty() {
                bins.push((OUT_OF_RANGE_BIN.to_string(), out_of_range));
            }
            Ok(bins)
        }
        StratifyScheme::Sex => {
            let mut male = Vec::new();
            let mut female = Vec::new();
            for r in records {
                if r.sex_true == 1 {
                    female.push(r);
                } else {
                    male.push(r);
                }
            }
            Ok(vec![("male".to_string(), male), ("female".to_string(), female)])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, age: f64, sex: u8) -> PredictionRecord {
        PredictionRecord {
            subject_id: id.to_string(),
            cohort: "t".to_string(),
            sex_true: sex,
            sex_score: Some(0.5),
            age_true: age,
            age_pred_raw: None,
            age_pred_corrected: None,
        }
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson_r(&x, &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson_r(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson_r(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12, "r = {r}");
        assert!(pearson_r(&[1.0, 1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn bias_fit_and_inversion() {
        let true_age: Vec<f64> = (0..20).map(|i| 40.0 + i as f64).collect();
        let identity = fit_bias_model(&true_age, &true_age, FitTag::InSample).unwrap();
        assert!((identity.slope - 1.0).abs() < 1e-12);
        assert!(identity.intercept.abs() < 1e-9);

        let pred: Vec<f64> = true_age.iter().map(|&t| 2.0 * t + 1.0).collect();
        let model = fit_bias_model(&pred, &true_age, FitTag::InSample).unwrap();
        assert!((model.slope - 2.0).abs() < 1e-9);
        assert!((model.intercept - 1.0).abs() < 1e-7);
        let corrected = apply_bias_correction(&model, &pred).unwrap();
        let mae: f64 = corrected.iter().zip(&true_age).map(|(c, t)| (c - t).abs()).sum::<f64>() / 20.0;
        assert!(mae < 1e-9, "mae {mae}");
        // refit on corrected predictions recovers the identity
        let refit = fit_bias_model(&corrected, &true_age, FitTag::InSample).unwrap();
        assert!((refit.slope - 1.0).abs() < 1e-8);
        assert!(refit.intercept.abs() < 1e-8);
    }

    #[test]
    fn bias_fit_recovers_generating_coefficients_under_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let true_age: Vec<f64> = (0..500).map(|_| rng.random_range(40.0..70.0)).collect();
        let pred: Vec<f64> = true_age
            .iter()
            .map(|&t| {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                0.7 * t + 15.0 + z
            })
            .collect();
        let model = fit_bias_model(&pred, &true_age, FitTag::InSample).unwrap();
        assert!((model.slope - 0.7).abs() < 0.05, "slope {}", model.slope);
        assert!((model.intercept - 15.0).abs() < 0.05 * 55.0, "intercept {}", model.intercept);
    }

    #[test]
    fn zero_slope_refused() {
        let true_age: Vec<f64> = (0..10).map(|i| 40.0 + i as f64).collect();
        let flat = vec![55.0; 10];
        assert!(matches!(
            fit_bias_model(&flat, &true_age, FitTag::InSample),
            Err(StatsError::Degenerate(_))
        ));
    }

    #[test]
    fn bonferroni_and_tiers_match_table_note() {
        assert!((bonferroni(0.05, 3) - 0.016667).abs() < 1e-6);
        assert_eq!(tier(0.002), Tier::Strong);
        assert_eq!(tier(0.002).marker(), "**");
        assert_eq!(tier(0.02), Tier::NotSignificant);
        assert_eq!(tier(0.02).marker(), "\u{a7}");
        assert_eq!(tier(0.01).marker(), "*");
        assert_eq!(tier(0.0001).marker(), "***");
        // boundary: exactly 0.017 is not significant
        assert_eq!(tier(0.017).marker(), "\u{a7}");
    }

    #[test]
    fn stratify_boundaries() {
        let records = vec![
            rec("a", 40.0, 0),
            rec("b", 50.0, 1),
            rec("c", 60.0, 0),
            rec("d", 70.0, 1),
            rec("e", 49.999, 0),
            rec("f", 71.5, 1),
        ];
        let bins = stratify(&records, StratifyScheme::AgeBins).unwrap();
        let by_name: std::collections::BTreeMap<&str, Vec<&str>> = bins
            .iter()
            .map(|(n, rs)| (n.as_str(), rs.iter().map(|r| r.subject_id.as_str()).collect()))
            .collect();
        assert_eq!(by_name["40-50"], vec!["a", "e"]);
        assert_eq!(by_name["50-60"], vec!["b"]);
        assert_eq!(by_name["60-70"], vec!["c", "d"]);
        assert_eq!(by_name[OUT_OF_RANGE_BIN], vec!["f"]);
        let in_bins: usize = AGE_BIN_NAMES.iter().map(|n| by_name[*n].len()).sum();
        assert_eq!(in_bins, records.len() - by_name[OUT_OF_RANGE_BIN].len());
    }

    #[test]
    fn stratify_sex_scheme() {
        let records = vec![rec("a", 45.0, 0), rec("b", 45.0, 1), rec("c", 45.0, 1)];
        let groups = stratify(&records, StratifyScheme::Sex).unwrap();
        assert_eq!(groups[0].0, "male");
        assert_eq!(groups[0].1.len(), 1);
        assert_eq!(groups[1].0, "female");
        assert_eq!(groups[1].1.len(), 2);
    }
}
