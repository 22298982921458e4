//! Synthetic head phantoms with controllable age and sex signal.
//!
//! Each phantom is a soft-edged ellipsoidal "brain" whose outer radius
//! shrinks linearly with age, containing a central dark "ventricle" that
//! grows linearly with age. Sex enters as a left-lateralized intensity and
//! size asymmetry: the left hemisphere (low W indices) is scaled by
//! `1 ± sex_dimorphism` depending on the sex label, the right hemisphere is
//! untouched. Gaussian noise is added on top. Everything is a pure function
//! of (spec.seed, subject.seed).

use super::{Result, Volume, VolumeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn default_age_range() -> (f64, f64) {
    (40.0, 70.0)
}
// The ventricle is the dominant age cue by design: global atrophy stays
// near the anatomical-jitter scale so a model must read the central
// structure, not the outer radius, to predict age well.
fn default_atrophy() -> f64 {
    0.0015
}
fn default_vent_growth() -> f64 {
    0.025
}
fn default_dimorphism() -> f64 {
    0.08
}
fn default_noise() -> f64 {
    0.015
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    /// Cube side in voxels (>= 16).
    pub extent: usize,
    pub seed: u64,
    #[serde(default = "default_age_range")]
    pub age_range: (f64, f64),
    /// Relative outer-radius shrinkage per year.
    #[serde(default = "default_atrophy")]
    pub atrophy_per_year: f64,
    /// Relative ventricle-radius growth per year.
    #[serde(default = "default_vent_growth")]
    pub ventricle_growth_per_year: f64,
    /// Left-hemisphere intensity/size asymmetry amplitude, signed by sex.
    #[serde(default = "default_dimorphism")]
    pub sex_dimorphism: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
}

impl PhantomSpec {
    pub fn desk_scale(extent: usize, seed: u64) -> Self {
        Self {
            extent,
            seed,
            age_range: default_age_range(),
            atrophy_per_year: default_atrophy(),
            ventricle_growth_per_year: default_vent_growth(),
            sex_dimorphism: default_dimorphism(),
            noise_sigma: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent < 16 {
            return Err(VolumeError::Invalid(format!("phantom extent {} < 16", self.extent)));
        }
        if self.age_range.1 <= self.age_range.0 {
            return Err(VolumeError::Invalid("age range must be increasing".into()));
        }
        for (name, v) in [
            ("atrophy_per_year", self.atrophy_per_year),
            ("ventricle_growth_per_year", self.ventricle_growth_per_year),
            ("sex_dimorphism", self.sex_dimorphism),
            ("noise_sigma", self.noise_sigma),
        ] {
            if v.is_nan() || v < 0.0 {
                return Err(VolumeError::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One subject's generative parameters. Sex: 1 = female, 0 = male.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectParams {
    pub sex: u8,
    pub age: f64,
    pub seed: u64,
}

pub const PHANTOM_REGION_NAMES: [&str; 4] = ["ventricle", "cortex_shell", "left_hemisphere", "right_hemisphere"];

const EDGE_SHARPNESS: f64 = 8.0;
const TISSUE_INTENSITY: f64 = 0.8;
const VENTRICLE_DARKENING: f64 = 0.85;
/// Subject-level anatomical variability: relative sigma of the brain and
/// ventricle radii, independent of age and sex. Keeps regional volumes from
/// being pure deterministic functions of the labels.
const BRAIN_RADIUS_JITTER: f64 = 0.03;
const VENT_RADIUS_JITTER: f64 = 0.005;

struct Geometry {
    center: f64,
    brain_r: f64,
    left_radius_scale: f64,
    left_intensity_scale: f64,
    vent_r: f64,
}

/// Geometry plus the subject RNG, positioned after the jitter draws so
/// voxel noise continues from the same stream.
fn subject_geometry(spec: &PhantomSpec, subject: &SubjectParams) -> (Geometry, ChaCha8Rng) {
    let e = spec.extent as f64;
    let age_mid = 0.5 * (spec.age_range.0 + spec.age_range.1);
    let signed = if subject.sex == 1 { 1.0 } else { -1.0 };
    let mut rng = subject_rng(spec, subject);
    let brain_jitter = 1.0 + BRAIN_RADIUS_JITTER * box_muller(&mut rng).clamp(-3.0, 3.0);
    let vent_jitter = 1.0 + VENT_RADIUS_JITTER * box_muller(&mut rng).clamp(-3.0, 3.0);
    let geometry = Geometry {
        center: (e - 1.0) / 2.0,
        brain_r: 0.42 * e * (1.0 - spec.atrophy_per_year * (subject.age - age_mid)) * brain_jitter,
        left_radius_scale: 1.0 + signed * spec.sex_dimorphism * 0.5,
        left_intensity_scale: 1.0 + signed * spec.sex_dimorphism,
        vent_r: 0.15 * e * (1.0 + spec.ventricle_growth_per_year * (subject.age - spec.age_range.0)) * vent_jitter,
    };
    (geometry, rng)
}

/// Normalized radii (brain, ventricle) of voxel (d, h, w); < 1 is inside.
fn radii(g: &Geometry, d: usize, h: usize, w: usize) -> (f64, f64) {
    let (zd, yd, xd) = (d as f64 - g.center, h as f64 - g.center, w as f64 - g.center);
    let rx = if (w as f64) < g.center { g.brain_r * g.left_radius_scale } else { g.brain_r };
    let rho_b = ((xd / rx).powi(2) + (yd / g.brain_r).powi(2) + (zd / g.brain_r).powi(2)).sqrt();
    let rho_v = (xd * xd + yd * yd + zd * zd).sqrt() / g.vent_r;
    (rho_b, rho_v)
}

fn soft_edge(rho: f64) -> f64 {
    1.0 / (1.0 + ((rho - 1.0) * EDGE_SHARPNESS).exp())
}

fn noiseless_intensity(g: &Geometry, d: usize, h: usize, w: usize) -> f64 {
    let (rho_b, rho_v) = radii(g, d, h, w);
    let m_b = soft_edge(rho_b);
    let m_v = soft_edge(rho_v);
    let scale = if (w as f64) < g.center { g.left_intensity_scale } else { 1.0 };
    m_b * TISSUE_INTENSITY * scale * (1.0 - VENTRICLE_DARKENING * m_v)
}

fn subject_rng(spec: &PhantomSpec, subject: &SubjectParams) -> ChaCha8Rng {
    let combined = spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(subject.seed);
    ChaCha8Rng::seed_from_u64(combined)
}

/// Deterministic phantom volume for one subject, 1 mm isotropic spacing.
pub fn generate_phantom(spec: &PhantomSpec, subject: &SubjectParams) -> Result<Volume> {
    spec.validate()?;
    if !(spec.age_range.0..=spec.age_range.1).contains(&subject.age) {
        return Err(VolumeError::Invalid(format!(
            "subject age {} outside spec range {:?}",
            subject.age, spec.age_range
        )));
    }
    let e = spec.extent;
    let (g, mut rng) = subject_geometry(spec, subject);
    let mut data = Vec::with_capacity(e * e * e);
    for d in 0..e {
        for h in 0..e {
            for w in 0..e {
                let mut v = noiseless_intensity(&g, d, h, w);
                if spec.noise_sigma > 0.0 {
                    v += spec.noise_sigma * box_muller(&mut rng);
                }
                data.push(v as f32);
            }
        }
    }
    Volume::new((e, e, e), (1.0, 1.0, 1.0), data)
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Region "volumes" measured on the noiseless geometry, in the order of
/// [`PHANTOM_REGION_NAMES`]: ventricle voxel count, cortex-shell voxel
/// count, and the soft tissue mass of each hemisphere.
pub fn phantom_region_volumes(spec: &PhantomSpec, subject: &SubjectParams) -> Result<[f64; 4]> {
    spec.validate()?;
    let e = spec.extent;
    let (g, _rng) = subject_geometry(spec, subject);
    let mut ventricle = 0.0f64;
    let mut shell = 0.0f64;
    let mut left = 0.0f64;
    let mut right = 0.0f64;
    for d in 0..e {
        for h in 0..e {
            for w in 0..e {
                let (rho_b, rho_v) = radii(&g, d, h, w);
                if rho_v <= 1.0 && rho_b <= 1.0 {
                    ventricle += 1.0;
                }
                if (0.85..=1.0).contains(&rho_b) {
                    shell += 1.0;
                }
                let v = noiseless_intensity(&g, d, h, w);
                if (w as f64) < g.center {
                    left += v;
                } else {
                    right += v;
                }
            }
        }
    }
    Ok([ventricle, shell, left, right])
}

/// Four handcrafted image features used by the linear probes: bright voxel
/// count, dark voxel count in the central cube, left-right mass asymmetry,
/// and total mass.
pub fn phantom_features(v: &Volume) -> [f64; 4] {
    let (d, h, w) = v.dims;
    let (cd, ch, cw) = (d as f64 / 2.0, h as f64 / 2.0, w as f64 / 2.0);
    let (qd, qh, qw) = (d as f64 / 4.0, h as f64 / 4.0, w as f64 / 4.0);
    let mut bright = 0.0f64;
    let mut central_dark = 0.0f64;
    let mut left = 0.0f64;
    let mut right = 0.0f64;
    let mut total = 0.0f64;
    for di in 0..d {
        for hi in 0..h {
            for wi in 0..w {
                let val = v.data[v.index(di, hi, wi)] as f64;
                total += val;
                if (wi as f64) < cw - 0.5 {
                    left += val;
                } else {
                    right += val;
                }
                if val > 0.4 {
                    bright += 1.0;
                }
                let central = (di as f64 - cd + 0.5).abs() < qd
                    && (hi as f64 - ch + 0.5).abs() < qh
                    && (wi as f64 - cw + 0.5).abs() < qw;
                if central && val < 0.45 {
                    central_dark += 1.0;
                }
            }
        }
    }
    let denom = if total.abs() < 1e-9 { 1.0 } else { total };
    [bright, central_dark, (left - right) / denom, total]
}

/// Least squares with intercept on standardized features.
fn fit_linear(features: &[[f64; 4]], targets: &[f64]) -> ([f64; 4], [f64; 4], [f64; 5]) {
    let n = features.len() as f64;
    let mut mean = [0.0f64; 4];
    let mut std = [0.0f64; 4];
    for f in features {
        for k in 0..4 {
            mean[k] += f[k];
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    for f in features {
        for k in 0..4 {
            std[k] += (f[k] - mean[k]).powi(2);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt().max(1e-9);
    }
    // normal equations over [1, z1..z4]
    let mut ata = [[0.0f64; 5]; 5];
    let mut atb = [0.0f64; 5];
    for (f, &y) in features.iter().zip(targets) {
        let row = [1.0, (f[0] - mean[0]) / std[0], (f[1] - mean[1]) / std[1], (f[2] - mean[2]) / std[2], (f[3] - mean[3]) / std[3]];
        for i in 0..5 {
            for j in 0..5 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * y;
        }
    }
    for (i, row) in ata.iter_mut().enumerate() {
        row[i] += 1e-9;
    }
    (mean, std, solve5(ata, atb))
}

#[allow(clippy::needless_range_loop)]
fn solve5(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> [f64; 5] {
    for col in 0..5 {
        let mut pivot = col;
        for r in col + 1..5 {
            if a[r][col].abs() > a[pivot][col].abs() {
                pivot = r;
            }
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        for r in 0..5 {
            if r == col {
                continue;
            }
            let factor = a[r][col] / diag;
            for c in col..5 {
                a[r][c] -= factor * a[col][c];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = [0.0f64; 5];
    for i in 0..5 {
        x[i] = b[i] / a[i][i];
    }
    x
}

fn probe_predictions(features: &[[f64; 4]], targets: &[f64]) -> Vec<f64> {
    let (mean, std, coef) = fit_linear(features, targets);
    features
        .iter()
        .map(|f| {
            let mut y = coef[0];
            for k in 0..4 {
                y += coef[k + 1] * (f[k] - mean[k]) / std[k];
            }
            y
        })
        .collect()
}

/// Accuracy of a least-squares linear probe separating sex labels from the
/// handcrafted features.
pub fn linear_probe_sex_accuracy(features: &[[f64; 4]], sexes: &[u8]) -> f64 {
    let targets: Vec<f64> = sexes.iter().map(|&s| if s == 1 { 1.0 } else { -1.0 }).collect();
    let preds = probe_predictions(features, &targets);
    let correct = preds
        .iter()
        .zip(sexes)
        .filter(|(&p, &s)| (p > 0.0) == (s == 1))
        .count();
    correct as f64 / sexes.len() as f64
}

/// Pearson correlation between linear-probe age predictions and true ages.
pub fn linear_probe_age_r(features: &[[f64; 4]], ages: &[f64]) -> f64 {
    let preds = probe_predictions(features, ages);
    pearson(&preds, ages)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
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
    sxy / (sxx.sqrt() * syy.sqrt()).max(1e-12)
}
