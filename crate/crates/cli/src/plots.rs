//! Human-readable comparison table and simple SVG plots. The plots are a
//! convenience layer over the exported CSVs; nothing downstream depends on
//! them.

use neurovol::stats::{EvalReport, PredictionRecord};
use std::path::Path;

fn ci(pair: (f64, f64)) -> String {
    format!("({:.3}-{:.3})", pair.0, pair.1)
}

/// Fixed-width text table mirroring the comparison layout: one row per
/// cohort and model, significance markers appended to the losing metrics.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("task: {}\n", report.task));
    out.push_str(&format!(
        "{:<24} {:>6} {:>22} {:>22} {:>22} {:>22}\n",
        "cohort/model", "n", "AUC (95% CI)", "AUPRC (95% CI)", "MAE (95% CI)", "Pearson r (95% CI)"
    ));
    for c in &report.cohorts {
        let sex_auc = c
            .sex
            .as_ref()
            .map(|s| format!("{:.4} {}", s.auc, ci(s.auc_ci)))
            .unwrap_or_else(|| "-".into());
        let sex_ap = c
            .sex
            .as_ref()
            .map(|s| format!("{:.4} {}", s.auprc, ci(s.auprc_ci)))
            .unwrap_or_else(|| "-".into());
        let age = c.age_corrected.as_ref().or(c.age_raw.as_ref());
        let mae = age.map(|a| format!("{:.2} {}", a.mae, ci(a.mae_ci))).unwrap_or_else(|| "-".into());
        let r = age.map(|a| format!("{:.2} {}", a.pearson_r, ci(a.r_ci))).unwrap_or_else(|| "-".into());
        out.push_str(&format!("{:<24} {:>6} {:>22} {:>22} {:>22} {:>22}\n", c.name, c.n, sex_auc, sex_ap, mae, r));
    }
    if let Some(comparison) = &report.comparison {
        out.push('\n');
        out.push_str(&format!("pairwise comparison over {} shared subjects\n", comparison.n_subjects));
        for metric in &comparison.metrics {
            out.push_str(&format!("  metric {}:\n", metric.metric));
            for (i, model) in comparison.models.iter().enumerate() {
                let marker = metric.markers[i].as_deref().unwrap_or(if i == metric.best { "(best)" } else { "" });
                out.push_str(&format!("    {:<16} {:+.6} {}\n", model, metric.points[i], marker));
            }
            for pair in &metric.pairwise {
                out.push_str(&format!(
                    "    {} vs {}: p = {:.6e} {}\n",
                    pair.model_a,
                    pair.model_b,
                    pair.result.p_value,
                    pair.result.tier.marker()
                ));
            }
        }
        for note in &comparison.notes {
            out.push_str(&format!("  note: {note}\n"));
        }
    }
    if let Some(sub) = &report.subgroups {
        out.push('\n');
        out.push_str(&format!("subgroups by {}\n", sub.scheme));
        for g in &sub.groups {
            let auc = g.sex.as_ref().map(|s| format!("AUC {:.4} {}", s.auc, ci(s.auc_ci))).unwrap_or_default();
            let age = g.age_corrected.as_ref().or(g.age_raw.as_ref());
            let mae = age
                .map(|a| format!("MAE {:.2} {}, r {:.2} {}", a.mae, ci(a.mae_ci), a.pearson_r, ci(a.r_ci)))
                .unwrap_or_default();
            out.push_str(&format!("  {:<14} n={:<5} {auc}{mae}\n", g.name, g.n));
            for note in &g.notes {
                out.push_str(&format!("    note: {note}\n"));
            }
        }
    }
    out
}

const SVG_SIZE: f64 = 420.0;
const MARGIN: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_header() -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n",
        SVG_SIZE
    )
}

fn to_px(x: f64, y: f64, x_range: (f64, f64), y_range: (f64, f64)) -> (f64, f64) {
    let span = SVG_SIZE - 2.0 * MARGIN;
    let px = MARGIN + (x - x_range.0) / (x_range.1 - x_range.0) * span;
    let py = SVG_SIZE - MARGIN - (y - y_range.0) / (y_range.1 - y_range.0) * span;
    (px, py)
}

/// ROC curves with the chance diagonal (dotted).
pub fn write_roc_svg(models: &[(String, Vec<PredictionRecord>)], path: &Path) -> std::io::Result<()> {
    let mut svg = svg_header();
    let (a, b) = to_px(0.0, 0.0, (0.0, 1.0), (0.0, 1.0));
    let (c, d) = to_px(1.0, 1.0, (0.0, 1.0), (0.0, 1.0));
    svg.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{0}\" height=\"{0}\" fill=\"none\" stroke=\"#333\"/>\n",
        SVG_SIZE - 2.0 * MARGIN
    ));
    svg.push_str(&format!(
        "<line x1=\"{a}\" y1=\"{b}\" x2=\"{c}\" y2=\"{d}\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n"
    ));
    for (i, (name, records)) in models.iter().enumerate() {
        let scores: Vec<f64> = records.iter().filter_map(|r| r.sex_score).collect();
        let labels: Vec<u8> = records.iter().filter(|r| r.sex_score.is_some()).map(|r| r.sex_true).collect();
        let Ok(points) = neurovol::stats::roc_points(&scores, &labels) else { continue };
        let path_points: Vec<String> = points
            .iter()
            .map(|&(fpr, tpr)| {
                let (x, y) = to_px(fpr, tpr, (0.0, 1.0), (0.0, 1.0));
                format!("{x:.1},{y:.1}")
            })
            .collect();
        let color = COLORS[i % COLORS.len()];
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path_points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>\n",
            MARGIN + 8.0,
            MARGIN + 16.0 + 14.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}

/// Age scatter (true vs predicted) with the identity diagonal (dotted).
pub fn write_scatter_svg(models: &[(String, Vec<PredictionRecord>)], path: &Path) -> std::io::Result<()> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, records) in models {
        for r in records {
            let p = r.age_pred_corrected.or(r.age_pred_raw).unwrap_or(r.age_true);
            lo = lo.min(r.age_true.min(p));
            hi = hi.max(r.age_true.max(p));
        }
    }
    if !lo.is_finite() || !hi.is_finite() || lo == hi {
        lo = 0.0;
        hi = 1.0;
    }
    let range = (lo - 1.0, hi + 1.0);
    let mut svg = svg_header();
    svg.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{0}\" height=\"{0}\" fill=\"none\" stroke=\"#333\"/>\n",
        SVG_SIZE - 2.0 * MARGIN
    ));
    let (a, b) = to_px(range.0, range.0, range, range);
    let (c, d) = to_px(range.1, range.1, range, range);
    svg.push_str(&format!(
        "<line x1=\"{a}\" y1=\"{b}\" x2=\"{c}\" y2=\"{d}\" stroke=\"#999\" stroke-dasharray=\"4 4\"/>\n"
    ));
    for (i, (name, records)) in models.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for r in records {
            let Some(p) = r.age_pred_corrected.or(r.age_pred_raw) else { continue };
            let (x, y) = to_px(r.age_true, p, range, range);
            svg.push_str(&format!("<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n"));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-size=\"12\">{name}</text>\n",
            MARGIN + 8.0,
            MARGIN + 16.0 + 14.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}
