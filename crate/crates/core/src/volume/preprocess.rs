//! Volume-level preprocessing: intensity z-normalization followed by center
//! cropping (or symmetric zero padding when the target is larger).

use super::{Result, Volume, VolumeError};

/// Zero mean, unit population variance over all voxels, computed in f64.
pub fn znormalize(v: &Volume) -> Result<Volume> {
    let n = v.data.len();
    if n < 2 {
        return Err(VolumeError::Degenerate("z-normalization needs more than one voxel".into()));
    }
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return Err(VolumeError::Degenerate("constant volume has zero variance".into()));
    }
    let inv_std = 1.0 / var.sqrt();
    let data: Vec<f32> = v.data.iter().map(|&x| ((x as f64 - mean) * inv_std) as f32).collect();
    Volume::with_affine(v.dims, v.spacing, v.affine, data)
}

/// Per-axis start index: non-negative for a crop, negative when padding.
fn crop_start(input: usize, target: usize) -> isize {
    if input >= target {
        ((input - target) / 2) as isize
    } else {
        // symmetric zero pad, extra voxel trailing
        -(((target - input) / 2) as isize)
    }
}

/// Center crop (or pad) to the target (D, H, W). The affine translation is
/// updated so retained voxels keep their world coordinates.
pub fn center_crop(v: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    let (td, th, tw) = target;
    if td < 1 || th < 1 || tw < 1 {
        return Err(VolumeError::Invalid("crop target must be >= 1 per axis".into()));
    }
    let (d, h, w) = v.dims;
    let (sd, sh, sw) = (crop_start(d, td), crop_start(h, th), crop_start(w, tw));
    let mut data = vec![0.0f32; td * th * tw];
    for od in 0..td {
        let id = od as isize + sd;
        if id < 0 || id >= d as isize {
            continue;
        }
        for oh in 0..th {
            let ih = oh as isize + sh;
            if ih < 0 || ih >= h as isize {
                continue;
            }
            // contiguous W runs
            let iw_lo = sw.max(0);
            let iw_hi = (sw + tw as isize).min(w as isize);
            if iw_lo >= iw_hi {
                continue;
            }
            let ow_lo = (iw_lo - sw) as usize;
            let run = (iw_hi - iw_lo) as usize;
            let src = (id as usize * h + ih as usize) * w + iw_lo as usize;
            let dst = (od * th + oh) * tw + ow_lo;
            data[dst..dst + run].copy_from_slice(&v.data[src..src + run]);
        }
    }
    // translate the origin to input voxel (sw, sh, sd) in (x, y, z) order
    let mut affine = v.affine;
    let s = [sw as f32, sh as f32, sd as f32];
    for row in affine.iter_mut().take(3) {
        row[3] += row[0] * s[0] + row[1] * s[1] + row[2] * s[2];
    }
    Volume::with_affine(target, v.spacing, affine, data)
}

/// The training-time preprocessing pipeline: z-normalize (optional), then
/// center crop (optional), in that order.
pub fn preprocess_volume(v: &Volume, crop: Option<(usize, usize, usize)>, znorm: bool) -> Result<Volume> {
    let mut out = if znorm { znormalize(v)? } else { v.clone() };
    if let Some(target) = crop {
        out = center_crop(&out, target)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn znormalize_two_values() {
        let v = Volume::new((1, 1, 2), (1.0, 1.0, 1.0), vec![0.0, 2.0]).unwrap();
        let z = znormalize(&v).unwrap();
        assert_eq!(z.data, vec![-1.0, 1.0]);
    }

    #[test]
    fn znormalize_constant_volume_is_degenerate() {
        let v = Volume::new((2, 2, 2), (1.0, 1.0, 1.0), vec![3.0; 8]).unwrap();
        assert!(matches!(znormalize(&v), Err(VolumeError::Degenerate(_))));
    }

    #[test]
    fn znormalize_random_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f32> = (0..4096).map(|_| rng.random_range(-50.0..150.0)).collect();
        let v = Volume::new((16, 16, 16), (1.0, 1.0, 1.0), data).unwrap();
        let z = znormalize(&v).unwrap();
        let n = z.data.len() as f64;
        let mean = z.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let std = (z.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-5, "std {std}");
    }

    #[test]
    fn znormalize_is_idempotent_within_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..512).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v = Volume::new((8, 8, 8), (1.0, 1.0, 1.0), data).unwrap();
        let once = znormalize(&v).unwrap();
        let twice = znormalize(&once).unwrap();
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn crop_start_cases() {
        assert_eq!(crop_start(4, 2), 1); // keeps {1, 2}
        assert_eq!(crop_start(182, 180), 1); // keeps 1..=180
        assert_eq!(crop_start(218, 180), 19); // keeps 19..=198
        assert_eq!(crop_start(3, 5), -1); // one leading zero, one trailing
        assert_eq!(crop_start(3, 6), -1); // one leading, two trailing
    }

    #[test]
    fn crop_keeps_center_and_pads_symmetrically() {
        let v = Volume::new((1, 1, 4), (1.0, 1.0, 1.0), vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let c = center_crop(&v, (1, 1, 2)).unwrap();
        assert_eq!(c.data, vec![11.0, 12.0]);
        let p = center_crop(&v, (1, 1, 6)).unwrap();
        assert_eq!(p.data, vec![0.0, 10.0, 11.0, 12.0, 13.0, 0.0]);
        let v3 = Volume::new((1, 1, 3), (1.0, 1.0, 1.0), vec![1.0, 2.0, 3.0]).unwrap();
        let p5 = center_crop(&v3, (1, 1, 5)).unwrap();
        assert_eq!(p5.data, vec![0.0, 1.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn crop_twice_to_same_target_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<f32> = (0..7 * 6 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = Volume::new((7, 6, 5), (1.0, 1.0, 1.0), data).unwrap();
        let once = center_crop(&v, (4, 4, 4)).unwrap();
        let twice = center_crop(&once, (4, 4, 4)).unwrap();
        assert_eq!(once.data, twice.data);
        assert_eq!(once.affine, twice.affine);
    }

    #[test]
    fn crop_preserves_world_coordinates() {
        let v = Volume::new((4, 4, 4), (2.0, 2.0, 2.0), (0..64).map(|x| x as f32).collect()).unwrap();
        let c = center_crop(&v, (2, 2, 2)).unwrap();
        // output voxel (0,0,0) is input voxel (1,1,1): world = affine·(1,1,1,1)
        for r in 0..3 {
            let want = v.affine[r][0] + v.affine[r][1] + v.affine[r][2] + v.affine[r][3];
            assert_eq!(c.affine[r][3], want);
        }
        // retained voxel value matches
        assert_eq!(c.data[0], v.data[v.index(1, 1, 1)]);
    }
}
