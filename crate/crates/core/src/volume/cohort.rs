//! Cohort manifests and synthetic cohort generation.
//!
//! Manifest CSV: header `subject_id,path,sex,age,cohort`, UTF-8, LF line
//! endings, paths stored relative to the manifest's directory.

use super::{generate_phantom, write_nifti, PhantomSpec, Result, SubjectParams, VolumeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST_HEADER: &str = "subject_id,path,sex,age,cohort";

#[derive(Debug, Clone, PartialEq)]
pub struct CohortRow {
    pub subject_id: String,
    /// Relative to the manifest file's directory.
    pub path: String,
    /// 1 = female, 0 = male.
    pub sex: u8,
    pub age: f64,
    pub cohort: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortManifest {
    pub rows: Vec<CohortRow>,
}

impl CohortManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for row in &self.rows {
            if !seen.insert(row.subject_id.as_str()) {
                return Err(VolumeError::Manifest(format!("duplicate subject_id {}", row.subject_id)));
            }
            if row.sex > 1 {
                return Err(VolumeError::Manifest(format!("sex must be 0 or 1, got {} for {}", row.sex, row.subject_id)));
            }
            if !row.age.is_finite() {
                return Err(VolumeError::Manifest(format!("non-finite age for {}", row.subject_id)));
            }
        }
        Ok(())
    }

    pub fn resolve_path(&self, manifest_path: &Path, row: &CohortRow) -> PathBuf {
        manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(&row.path)
    }
}

/// How ages are drawn; always truncated to the phantom spec's range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgeDistribution {
    Uniform,
    Normal { mean: f64, sd: f64 },
}

fn draw_age(rng: &mut ChaCha8Rng, dist: AgeDistribution, range: (f64, f64)) -> f64 {
    match dist {
        AgeDistribution::Uniform => rng.random_range(range.0..range.1),
        AgeDistribution::Normal { mean, sd } => loop {
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let age = mean + sd * z;
            if (range.0..=range.1).contains(&age) {
                return age;
            }
        },
    }
}

/// Generate `n` phantom subjects under `out_dir`: one NIfTI per subject plus
/// `manifest.csv`. Sexes are Bernoulli(`sex_ratio` female), ages come from
/// `age_distribution` truncated to the spec range. Deterministic per seed.
/// Also returns each subject's generator seed so callers can recompute
/// derived quantities (region volumes) from the same geometry.
pub fn make_cohort(
    spec: &PhantomSpec,
    n: usize,
    sex_ratio: f64,
    age_distribution: AgeDistribution,
    seed: u64,
    cohort_tag: &str,
    out_dir: &Path,
) -> Result<(CohortManifest, Vec<u64>)> {
    if n < 1 {
        return Err(VolumeError::Manifest("cohort size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&sex_ratio) {
        return Err(VolumeError::Manifest(format!("sex ratio {sex_ratio} outside [0, 1]")));
    }
    spec.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut subject_seeds = Vec::with_capacity(n);
    for i in 0..n {
        let sex = u8::from(rng.random::<f64>() < sex_ratio);
        let age = draw_age(&mut rng, age_distribution, spec.age_range);
        let subject_seed = rng.random::<u64>();
        let subject_id = format!("{cohort_tag}_{i:04}");
        let file = format!("{subject_id}.nii");
        let volume = generate_phantom(spec, &SubjectParams { sex, age, seed: subject_seed })?;
        write_nifti(&volume, out_dir.join(&file))?;
        rows.push(CohortRow { subject_id, path: file, sex, age, cohort: cohort_tag.to_string() });
        subject_seeds.push(subject_seed);
    }
    let manifest = CohortManifest { rows };
    write_manifest(&manifest, &out_dir.join("manifest.csv"))?;
    Ok((manifest, subject_seeds))
}

pub fn write_manifest(manifest: &CohortManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for row in &manifest.rows {
        for field in [row.subject_id.as_str(), row.path.as_str(), row.cohort.as_str()] {
            if field.contains(',') || field.contains('\n') {
                return Err(VolumeError::Manifest(format!("field {field:?} contains a delimiter")));
            }
        }
        out.push_str(&format!("{},{},{},{:.3},{}\n", row.subject_id, row.path, row.sex, row.age, row.cohort));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CohortManifest> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == MANIFEST_HEADER => {}
        other => {
            return Err(VolumeError::Manifest(format!(
                "manifest header {:?} must be {MANIFEST_HEADER:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(VolumeError::Manifest(format!("line {}: expected 5 fields, got {}", lineno + 2, fields.len())));
        }
        let sex: u8 = fields[2]
            .parse()
            .map_err(|_| VolumeError::Manifest(format!("line {}: bad sex {:?}", lineno + 2, fields[2])))?;
        let age: f64 = fields[3]
            .parse()
            .map_err(|_| VolumeError::Manifest(format!("line {}: bad age {:?}", lineno + 2, fields[3])))?;
        rows.push(CohortRow {
            subject_id: fields[0].to_string(),
            path: fields[1].to_string(),
            sex,
            age,
            cohort: fields[4].to_string(),
        });
    }
    let manifest = CohortManifest { rows };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohort_counts_ids_and_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec::desk_scale(16, 5);
        let (manifest, seeds) = make_cohort(&spec, 100, 0.522, AgeDistribution::Uniform, 11, "synth", dir.path()).unwrap();
        assert_eq!(seeds.len(), 100);
        assert_eq!(manifest.len(), 100);
        let ids: BTreeSet<_> = manifest.rows.iter().map(|r| r.subject_id.clone()).collect();
        assert_eq!(ids.len(), 100);
        // binomial(100, 0.522): a 99% interval is comfortably within 0.39..0.65
        let females = manifest.rows.iter().filter(|r| r.sex == 1).count();
        assert!((39..=65).contains(&females), "got {females} females");
        for row in &manifest.rows {
            assert!((40.0..70.0).contains(&row.age));
            assert!(dir.path().join(&row.path).exists());
        }
    }

    #[test]
    fn rerun_same_seed_identical_manifest_bytes() {
        let spec = PhantomSpec::desk_scale(16, 5);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        make_cohort(&spec, 12, 0.5, AgeDistribution::Normal { mean: 55.0, sd: 8.0 }, 3, "c", dir_a.path()).unwrap();
        make_cohort(&spec, 12, 0.5, AgeDistribution::Normal { mean: 55.0, sd: 8.0 }, 3, "c", dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("manifest.csv")).unwrap();
        let b = std::fs::read(dir_b.path().join("manifest.csv")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn manifest_round_trip_and_duplicate_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = CohortManifest {
            rows: vec![
                CohortRow { subject_id: "a".into(), path: "a.nii".into(), sex: 0, age: 44.25, cohort: "t".into() },
                CohortRow { subject_id: "b".into(), path: "b.nii".into(), sex: 1, age: 61.0, cohort: "t".into() },
            ],
        };
        let path = dir.path().join("manifest.csv");
        write_manifest(&manifest, &path).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[0].subject_id, "a");
        assert!((back.rows[0].age - 44.25).abs() < 1e-9);

        let dup = CohortManifest {
            rows: vec![manifest.rows[0].clone(), manifest.rows[0].clone()],
        };
        assert!(matches!(write_manifest(&dup, &path), Err(VolumeError::Manifest(_))));
    }
}
