//! Input×gradient saliency: `|x ⊙ ∂ŷ/∂x|`, max-normalized to [0, 1].

use super::{ExplainError, Result};
use crate::nets::{Network, Task};
use crate::stats::PredictionRecord;
use crate::tensor::{Mode, Tape};
use crate::volume::Volume;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Default overlay threshold; the reported per-cohort choices span
/// 0.08–0.25.
pub const DEFAULT_SALIENCY_THRESHOLD: f32 = 0.1;

/// A volume-shaped attribution field normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub dims: (usize, usize, usize),
    pub data: Vec<f32>,
    pub source_subjects: Vec<String>,
    pub task: Task,
    /// Threshold applied by [`threshold_overlay`], when any.
    pub threshold: Option<f32>,
    /// All-zero attribution (normalization skipped to avoid 0/0).
    pub degenerate: bool,
}

impl SaliencyMap {
    /// Wrap as a volume with the metadata of `like` so it can be written
    /// out as NIfTI next to its source image.
    pub fn to_volume(&self, like: &Volume) -> Result<Volume> {
        Ok(Volume::with_affine(self.dims, like.spacing, like.affine, self.data.clone())?)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }
}

/// Normalize `|x ⊙ g|` to a [0, 1] map; an all-zero attribution is returned
/// as-is with the degenerate flag set.
pub fn saliency_from_gradient(dims: (usize, usize, usize), x: &[f32], grad: &[f32], task: Task) -> SaliencyMap {
    let mut data: Vec<f32> = x.iter().zip(grad).map(|(&xv, &gv)| (xv * gv).abs()).collect();
    let max = data.iter().copied().fold(0.0f32, f32::max);
    let degenerate = max <= 0.0;
    if !degenerate {
        for v in &mut data {
            *v /= max;
        }
    }
    SaliencyMap { dims, data, source_subjects: Vec::new(), task, threshold: None, degenerate }
}

/// Saliency of one preprocessed volume under an eval-mode network: the
/// gradient of the single head output (positive-class logit for sex,
/// scalar prediction for age) with respect to the input image, times the
/// input, absolute and max-normalized.
pub fn saliency(net: &mut Network<f32>, volume: &Volume, subject_id: &str) -> Result<SaliencyMap> {
    let (d, h, w) = volume.dims;
    let e = net.config.input_extent();
    if (d, h, w) != (e, e, e) {
        return Err(ExplainError::Contract(format!(
            "volume dims {:?} do not match network extent {e}",
            volume.dims
        )));
    }
    let task = net.config.task();
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(volume.to_tensor::<f32>(), true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = net.forward(&mut tape, x, Mode::Eval, &mut rng)?;
    let grads = tape.backward(pass.output)?;
    let grad = grads
        .get(x)
        .ok_or_else(|| ExplainError::Contract("input did not receive a gradient".into()))?;
    let mut map = saliency_from_gradient(volume.dims, &volume.data, grad, task);
    map.source_subjects = vec![subject_id.to_string()];
    Ok(map)
}

/// Indices of `records` ordered most-confident first. Sex confidence is the
/// distance of the probability from 0.5 (descending); age confidence is the
/// absolute prediction error (ascending). Ties break by subject id.
pub fn rank_by_confidence(records: &[PredictionRecord], task: Task) -> Result<Vec<usize>> {
    let mut keyed: Vec<(usize, f64)> = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let confidence = match task {
            Task::Sex | Task::BinaryGeneric => {
                let p = r
                    .sex_score
                    .ok_or_else(|| ExplainError::Contract(format!("record {} has no sex_score", r.subject_id)))?;
                (p - 0.5).abs()
            }
            Task::Age => {
                let pred = r
                    .age_pred_corrected
                    .or(r.age_pred_raw)
                    .ok_or_else(|| ExplainError::Contract(format!("record {} has no age prediction", r.subject_id)))?;
                -(pred - r.age_true).abs()
            }
        };
        keyed.push((i, confidence));
    }
    keyed.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| records[a.0].subject_id.cmp(&records[b.0].subject_id))
    });
    Ok(keyed.into_iter().map(|(i, _)| i).collect())
}

/// Voxelwise mean of the k most confidently predicted subjects' maps,
/// renormalized to max 1. With fewer than k subjects every map is used and
/// the shortfall is reported in the returned count.
pub fn top_k_average(
    records: &[PredictionRecord],
    maps: &[SaliencyMap],
    k: usize,
    task: Task,
) -> Result<(SaliencyMap, usize)> {
    if records.len() != maps.len() || maps.is_empty() {
        return Err(ExplainError::Contract(format!(
            "need equally many records and maps, got {} and {}",
            records.len(),
            maps.len()
        )));
    }
    let dims = maps[0].dims;
    if maps.iter().any(|m| m.dims != dims) {
        return Err(ExplainError::Contract("saliency maps differ in shape".into()));
    }
    let order = rank_by_confidence(records, task)?;
    let used = k.min(order.len());
    let chosen = &order[..used];
    let mut acc = vec![0.0f32; maps[0].data.len()];
    let mut subjects = Vec::with_capacity(used);
    for &i in chosen {
        for (a, &v) in acc.iter_mut().zip(&maps[i].data) {
            *a += v;
        }
        subjects.push(records[i].subject_id.clone());
    }
    let inv = 1.0 / used as f32;
    for a in &mut acc {
        *a *= inv;
    }
    let max = acc.iter().copied().fold(0.0f32, f32::max);
    let degenerate = max <= 0.0;
    if !degenerate {
        for a in &mut acc {
            *a /= max;
        }
    }
    Ok((SaliencyMap { dims, data: acc, source_subjects: subjects, task, threshold: None, degenerate }, used))
}

/// Zero out values below `t`.
pub fn threshold_overlay(map: &SaliencyMap, t: f32) -> Result<SaliencyMap> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ExplainError::Contract(format!("threshold {t} outside [0, 1]")));
    }
    let data: Vec<f32> = map.data.iter().map(|&v| if v < t { 0.0 } else { v }).collect();
    Ok(SaliencyMap { data, threshold: Some(t), ..map.clone() })
}

/// Axial slice mosaic as binary PGM (P5, 8-bit): slices taken top to bottom
/// in steps of `gap`, laid out in rows of nine tiles.
pub fn write_mosaic_pgm(map: &SaliencyMap, path: &Path, gap: usize) -> Result<()> {
    let (d, h, w) = map.dims;
    let gap = gap.max(1);
    let slices: Vec<usize> = (0..d).step_by(gap).collect();
    let cols = slices.len().min(9);
    let rows = slices.len().div_ceil(9);
    let (width, height) = (cols * w, rows * h);
    let mut pixels = vec![0u8; width * height];
    for (s, &di) in slices.iter().enumerate() {
        let (tile_r, tile_c) = (s / 9, s % 9);
        for hi in 0..h {
            for wi in 0..w {
                let v = map.data[(di * h + hi) * w + wi].clamp(0.0, 1.0);
                pixels[(tile_r * h + hi) * width + tile_c * w + wi] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    write!(file, "P5\n{width} {height}\n255\n")?;
    file.write_all(&pixels)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn record(id: &str, score: Option<f64>, age_pred: Option<f64>, age_true: f64) -> PredictionRecord {
        PredictionRecord {
            subject_id: id.to_string(),
            cohort: "t".into(),
            sex_true: 0,
            sex_score: score,
            age_true,
            age_pred_raw: age_pred,
            age_pred_corrected: None,
        }
    }

    #[test]
    fn constant_gradient_gives_abs_input_normalized() {
        // a model that is a plain global average has a constant input
        // gradient, so saliency is |x| max-normalized
        let x = vec![0.5f32, -1.0, 0.25, 0.0, 2.0, -0.125, 0.75, 1.5];
        let g = vec![0.3f32; 8];
        let map = saliency_from_gradient((2, 2, 2), &x, &g, Task::Sex);
        let max_abs = 2.0f32;
        for (m, xv) in map.data.iter().zip(&x) {
            assert!((m - xv.abs() / max_abs).abs() < 1e-7);
        }
        assert_eq!(map.max_value(), 1.0);
        // zero input with any gradient contributes zero
        assert_eq!(map.data[3], 0.0);
    }

    #[test]
    fn all_zero_attribution_is_degenerate_not_nan() {
        let map = saliency_from_gradient((1, 1, 2), &[0.0, 0.0], &[1.0, -1.0], Task::Age);
        assert!(map.degenerate);
        assert!(map.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sfcn_saliency_values_in_unit_range_and_rescale_invariant() {
        let cfg = NetConfig::Sfcn { input_extent: 16, channels: vec![2, 3], task: Task::Sex, dropout_p: 0.0 };
        let mut net = Network::<f32>::build(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f32> = (0..16 * 16 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vol = Volume::new((16, 16, 16), (1.0, 1.0, 1.0), data).unwrap();
        let map = saliency(&mut net, &vol, "s0").unwrap();
        assert!(map.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(map.max_value(), 1.0);
        // scaling the head weights by 3 scales the output, but the
        // normalization divides it out
        for name in ["head.weight", "head.bias"] {
            let t = net.params.get_mut(name).unwrap();
            for v in t.make_mut() {
                *v *= 3.0;
            }
        }
        let scaled = saliency(&mut net, &vol, "s0").unwrap();
        let max_diff = map
            .data
            .iter()
            .zip(&scaled.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn sfcn_saliency_matches_finite_difference_input_gradient() {
        // 64-bit finite differences on 20 sampled voxels
        let cfg = NetConfig::Sfcn { input_extent: 8, channels: vec![2, 2], task: Task::Sex, dropout_p: 0.0 };
        let mut net = Network::<f64>::build(cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(vec![1, 1, 8, 8, 8], data.clone()).unwrap();

        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), true);
        let mut frng = ChaCha8Rng::seed_from_u64(0);
        let pass = net.forward(&mut tape, xid, Mode::Eval, &mut frng).unwrap();
        let grads = tape.backward(pass.output).unwrap();
        let analytic = grads.get(xid).unwrap().to_vec();
        drop(tape);

        let h = 1e-5;
        for k in 0..20 {
            let idx = (k * 25) % 512;
            let mut eval = |vals: Vec<f64>| -> f64 {
                let mut t = Tape::<f64>::no_grad();
                let id = t.leaf(Tensor::from_vec(vec![1, 1, 8, 8, 8], vals).unwrap(), false);
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let p = net.forward(&mut t, id, Mode::Eval, &mut r).unwrap();
                t.value(p.output).as_slice()[0]
            };
            let mut plus = data.clone();
            plus[idx] += h;
            let mut minus = data.clone();
            minus[idx] -= h;
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let sal_analytic = (data[idx] * analytic[idx]).abs();
            let sal_numeric = (data[idx] * numeric).abs();
            let rel = (sal_analytic - sal_numeric).abs() / 1e-12f64.max(sal_analytic + sal_numeric);
            assert!(rel < 1e-3, "voxel {idx}: rel err {rel}");
        }
    }

    #[test]
    fn top_k_identities() {
        let dims = (1, 2, 2);
        let mk = |vals: [f32; 4]| SaliencyMap {
            dims,
            data: vals.to_vec(),
            source_subjects: vec![],
            task: Task::Sex,
            threshold: None,
            degenerate: false,
        };
        let maps = vec![mk([1.0, 0.5, 0.0, 0.25]); 3];
        let records: Vec<PredictionRecord> =
            (0..3).map(|i| record(&format!("s{i}"), Some(0.9), None, 50.0)).collect();
        // k identical maps: average equals each map
        let (avg, used) = top_k_average(&records, &maps, 3, Task::Sex).unwrap();
        assert_eq!(used, 3);
        assert_eq!(avg.data, maps[0].data);
        // k = 1 is identity on the most confident subject's map
        let (one, used1) = top_k_average(&records, &maps, 1, Task::Sex).unwrap();
        assert_eq!(used1, 1);
        assert_eq!(one.data, maps[0].data);
        // fewer subjects than k: use all
        let (_, used_all) = top_k_average(&records, &maps, 10, Task::Sex).unwrap();
        assert_eq!(used_all, 3);
    }

    #[test]
    fn ranking_matches_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // sex task
        let records: Vec<PredictionRecord> =
            (0..50).map(|i| record(&format!("s{i:02}"), Some(rng.random::<f64>()), None, 50.0)).collect();
        let order = rank_by_confidence(&records, Task::Sex).unwrap();
        let mut expect: Vec<usize> = (0..50).collect();
        expect.sort_by(|&a, &b| {
            let ca = (records[a].sex_score.unwrap() - 0.5).abs();
            let cb = (records[b].sex_score.unwrap() - 0.5).abs();
            cb.partial_cmp(&ca).unwrap().then(records[a].subject_id.cmp(&records[b].subject_id))
        });
        assert_eq!(order, expect);
        // age task: low |error| first
        let age_records: Vec<PredictionRecord> = (0..50)
            .map(|i| record(&format!("a{i:02}"), None, Some(rng.random_range(40.0..70.0)), 55.0))
            .collect();
        let age_order = rank_by_confidence(&age_records, Task::Age).unwrap();
        for w in age_order.windows(2) {
            let e0 = (age_records[w[0]].age_pred_raw.unwrap() - 55.0).abs();
            let e1 = (age_records[w[1]].age_pred_raw.unwrap() - 55.0).abs();
            assert!(e0 <= e1);
        }
    }

    #[test]
    fn threshold_cases() {
        let map = SaliencyMap {
            dims: (1, 1, 4),
            data: vec![1.0, 0.5, 0.09, 0.0],
            source_subjects: vec![],
            task: Task::Sex,
            threshold: None,
            degenerate: false,
        };
        let t0 = threshold_overlay(&map, 0.0).unwrap();
        assert_eq!(t0.data, map.data);
        let t1 = threshold_overlay(&map, 1.0).unwrap();
        assert_eq!(t1.data, vec![1.0, 0.0, 0.0, 0.0]);
        let td = threshold_overlay(&map, DEFAULT_SALIENCY_THRESHOLD).unwrap();
        assert_eq!(td.data, vec![1.0, 0.5, 0.0, 0.0]);
        // the default sits inside the reported 0.08..0.25 band
        assert!((0.08..=0.25).contains(&DEFAULT_SALIENCY_THRESHOLD));
    }

    #[test]
    fn mosaic_pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let d = 32;
        let map = SaliencyMap {
            dims: (d, 4, 4),
            data: (0..d * 16).map(|i| (i % 7) as f32 / 7.0).collect(),
            source_subjects: vec![],
            task: Task::Sex,
            threshold: None,
            degenerate: false,
        };
        let path = dir.path().join("mosaic.pgm");
        write_mosaic_pgm(&map, &path, 10).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // slices 0, 10, 20, 30 -> 4 tiles in one row of four columns
        let header = format!("P5\n{} {}\n255\n", 4 * 4, 4);
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + 16 * 4);
    }
}
