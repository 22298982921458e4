//! Region-volume correlation analysis: per-region Pearson correlation of
//! regional volumes against model prediction scores and ground-truth
//! labels, grouped by nine anatomical lobes.

use super::{ExplainError, Result};
use crate::nets::Task;
use crate::stats::{pearson_r, PredictionRecord};
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

/// The fixed nine-lobe grouping, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Lobe {
    Frontal,
    Parietal,
    Occipital,
    Temporal,
    Limbic,
    Insular,
    Subcortical,
    Cerebellum,
    BrainStem,
}

pub const LOBE_ORDER: [Lobe; 9] = [
    Lobe::Frontal,
    Lobe::Parietal,
    Lobe::Occipital,
    Lobe::Temporal,
    Lobe::Limbic,
    Lobe::Insular,
    Lobe::Subcortical,
    Lobe::Cerebellum,
    Lobe::BrainStem,
];

impl Lobe {
    pub fn parse(s: &str) -> Option<Lobe> {
        match s {
            "frontal" => Some(Lobe::Frontal),
            "parietal" => Some(Lobe::Parietal),
            "occipital" => Some(Lobe::Occipital),
            "temporal" => Some(Lobe::Temporal),
            "limbic" => Some(Lobe::Limbic),
            "insular" => Some(Lobe::Insular),
            "subcortical" => Some(Lobe::Subcortical),
            "cerebellum" => Some(Lobe::Cerebellum),
            "brain_stem" => Some(Lobe::BrainStem),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Lobe::Frontal => "frontal",
            Lobe::Parietal => "parietal",
            Lobe::Occipital => "occipital",
            Lobe::Temporal => "temporal",
            Lobe::Limbic => "limbic",
            Lobe::Insular => "insular",
            Lobe::Subcortical => "subcortical",
            Lobe::Cerebellum => "cerebellum",
            Lobe::BrainStem => "brain_stem",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionDef {
    pub idp_id: String,
    pub region_name: String,
    pub lobe: Lobe,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RegionMapping {
    pub regions: Vec<RegionDef>,
}

/// Load `idp_id,region_name,lobe` rows; every lobe label must be one of the
/// nine groups and idp ids must be unique.
pub fn load_region_mapping(path: &Path) -> Result<RegionMapping> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "idp_id,region_name,lobe" => {}
        other => {
            return Err(ExplainError::RegionTable(format!(
                "header {:?} must be \"idp_id,region_name,lobe\"",
                other.unwrap_or("")
            )))
        }
    }
    let mut regions = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(ExplainError::RegionTable(format!("line {}: expected 3 fields", i + 2)));
        }
        if !seen.insert(f[0].to_string()) {
            return Err(ExplainError::RegionTable(format!("duplicate idp_id {:?}", f[0])));
        }
        let lobe = Lobe::parse(f[2].trim()).ok_or_else(|| {
            ExplainError::RegionTable(format!(
                "line {}: unknown lobe {:?} (expected one of the nine groups)",
                i + 2,
                f[2]
            ))
        })?;
        regions.push(RegionDef { idp_id: f[0].to_string(), region_name: f[1].to_string(), lobe });
    }
    Ok(RegionMapping { regions })
}

/// Per-subject region volumes keyed `idp_id -> subject_id -> mm³`.
pub type RegionVolumes = BTreeMap<String, BTreeMap<String, f64>>;

/// Long-format CSV `subject_id,idp_id,volume`.
pub fn read_region_volumes(path: &Path) -> Result<RegionVolumes> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "subject_id,idp_id,volume" => {}
        other => {
            return Err(ExplainError::RegionTable(format!(
                "header {:?} must be \"subject_id,idp_id,volume\"",
                other.unwrap_or("")
            )))
        }
    }
    let mut volumes: RegionVolumes = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(ExplainError::RegionTable(format!("line {}: expected 3 fields", i + 2)));
        }
        let v: f64 = f[2]
            .parse()
            .map_err(|_| ExplainError::RegionTable(format!("line {}: bad volume {:?}", i + 2, f[2])))?;
        volumes.entry(f[1].to_string()).or_default().insert(f[0].to_string(), v);
    }
    Ok(volumes)
}

pub fn write_region_volumes(volumes: &RegionVolumes, path: &Path) -> Result<()> {
    let mut out = String::from("subject_id,idp_id,volume\n");
    for (idp, per_subject) in volumes {
        for (subject, v) in per_subject {
            out.push_str(&format!("{subject},{idp},{v}\n"));
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionCorrelation {
    pub idp_id: String,
    pub region_name: String,
    pub lobe: Lobe,
    /// Subjects present in both the record set and the region table.
    pub n_used: usize,
    pub r_prediction: Option<f64>,
    pub r_label: Option<f64>,
}

/// Correlate each region's volumes with the model prediction (sex:
/// probability score; age: corrected prediction, falling back to raw) and
/// with the ground-truth label, using the same product-moment formula for
/// the binary case. Output is grouped by the nine lobes in fixed order;
/// subjects missing a volume are dropped listwise per region.
pub fn region_correlations(
    mapping: &RegionMapping,
    volumes: &RegionVolumes,
    records: &[PredictionRecord],
    task: Task,
) -> Result<Vec<RegionCorrelation>> {
    let prediction = |r: &PredictionRecord| -> Result<f64> {
        match task {
            Task::Sex | Task::BinaryGeneric => r
                .sex_score
                .ok_or_else(|| ExplainError::Contract(format!("record {} has no sex_score", r.subject_id))),
            Task::Age => r
                .age_pred_corrected
                .or(r.age_pred_raw)
                .ok_or_else(|| ExplainError::Contract(format!("record {} has no age prediction", r.subject_id))),
        }
    };
    let label = |r: &PredictionRecord| -> f64 {
        match task {
            Task::Sex | Task::BinaryGeneric => r.sex_true as f64,
            Task::Age => r.age_true,
        }
    };
    let mut ordered: Vec<&RegionDef> = Vec::new();
    for lobe in LOBE_ORDER {
        for def in &mapping.regions {
            if def.lobe == lobe {
                ordered.push(def);
            }
        }
    }
    let mut out = Vec::with_capacity(ordered.len());
    for def in ordered {
        let per_subject = volumes.get(&def.idp_id);
        let mut vols = Vec::new();
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        if let Some(per_subject) = per_subject {
            for r in records {
                if let Some(&v) = per_subject.get(&r.subject_id) {
                    vols.push(v);
                    preds.push(prediction(r)?);
                    labels.push(label(r));
                }
            }
        }
        let r_prediction = pearson_r(&vols, &preds).ok();
        let r_label = pearson_r(&vols, &labels).ok();
        out.push(RegionCorrelation {
            idp_id: def.idp_id.clone(),
            region_name: def.region_name.clone(),
            lobe: def.lobe,
            n_used: vols.len(),
            r_prediction,
            r_label,
        });
    }
    Ok(out)
}
