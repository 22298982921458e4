//! Central finite-difference gradient checking.
//!
//! The checker is the independent oracle for every backward rule in this
//! crate: it re-derives each gradient coordinate from two forward
//! evaluations and compares against the tape's analytic result. It must be
//! run on `f64` tensors; 32-bit arithmetic does not have the headroom for
//! step sizes around 1e-5. The function under test must be deterministic;
//! checking a randomized function (unseeded dropout) is undefined.

use super::{Result, Tape, Tensor, TensorError, TensorId};

/// Largest relative error between analytic and central-difference gradients
/// over all coordinates of `x`:
/// `|analytic − numeric| / max(1e-12, |analytic| + |numeric|)`.
pub fn finite_diff_check<F>(f: &mut F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::<f64>::new();
    let xid = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xid)?;
    if tape.value(loss).numel() != 1 {
        return Err(TensorError::Contract("finite_diff_check requires a scalar-valued function".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = grads.get(xid).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    drop(tape);

    let mut max_rel = 0.0f64;
    let base = x.as_slice().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let fp = eval_scalar(f, x.shape(), plus)?;
        let mut minus = base.clone();
        minus[i] -= h;
        let fm = eval_scalar(f, x.shape(), minus)?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / 1e-12f64.max(a.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn eval_scalar<F>(f: &mut F, shape: &[usize], data: Vec<f64>) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::<f64>::no_grad();
    let xid = tape.leaf(Tensor::from_vec(shape.to_vec(), data)?, false);
    let loss = f(&mut tape, xid)?;
    Ok(tape.value(loss).as_slice()[0])
}

/// One entry of the standard op battery: name, measured error, tolerance.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Run finite-difference checks over every differentiable op with random
/// 64-bit inputs (extents at most 6 per axis). Elementwise ops are held to
/// 1e-8, everything else to 1e-4.
pub fn op_gradient_sweep() -> Vec<OpCheck> {
    use super::ops_conv::ConvSpec;
    use super::ops_norm::{Mode, RunningStats};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }
    // keep relu/max inputs away from kinks
    fn rand_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(0.2..1.0);
                if rng.random::<bool>() {
                    v
                } else {
                    -v
                }
            })
            .collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);

    const ELEMWISE_TOL: f64 = 1e-8;
    const GENERAL_TOL: f64 = 1e-4;
    const H: f64 = 1e-5;
    let mut checks: Vec<OpCheck> = Vec::new();
    let mut run = |name: &'static str,
                   tol: f64,
                   x: Tensor<f64>,
                   f: &mut dyn FnMut(&mut Tape<f64>, TensorId) -> Result<TensorId>| {
        let err = finite_diff_check(&mut |t: &mut Tape<f64>, id| f(t, id), &x, H).expect(name);
        checks.push(OpCheck { name, max_rel_err: err, tolerance: tol });
    };

    run("relu", ELEMWISE_TOL, rand_off_zero(&mut rng, &[2, 5]), &mut |t, x| {
        let y = t.relu(x)?;
        t.sum_all(y)
    });
    run("gelu", ELEMWISE_TOL, rand_tensor(&mut rng, &[2, 5], -2.0, 2.0), &mut |t, x| {
        let y = t.gelu(x)?;
        t.sum_all(y)
    });
    run("sigmoid", ELEMWISE_TOL, rand_tensor(&mut rng, &[2, 5], -3.0, 3.0), &mut |t, x| {
        let y = t.sigmoid(x)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    run("softmax", ELEMWISE_TOL, rand_tensor(&mut rng, &[3, 4], -2.0, 2.0), &mut |t, x| {
        let y = t.softmax(x, 1)?;
        let w = t.mul(y, y)?;
        t.sum_all(w)
    });
    run("add_mul_scale", ELEMWISE_TOL, rand_tensor(&mut rng, &[4, 3], -1.0, 1.0), &mut |t, x| {
        let s = t.scale(x, 1.7)?;
        let a = t.add(s, x)?;
        let m = t.mul(a, x)?;
        t.sum_all(m)
    });

    let bcast_rhs = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    run("add_bcast_lhs", ELEMWISE_TOL, rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0), &mut |t, x| {
        let b = t.leaf(bcast_rhs.clone(), false);
        let y = t.add_bcast(x, b)?;
        let m = t.mul(y, y)?;
        t.sum_all(m)
    });
    let bcast_lhs = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
    run("add_bcast_rhs", ELEMWISE_TOL, rand_tensor(&mut rng, &[4, 1], -1.0, 1.0), &mut |t, x| {
        let a = t.leaf(bcast_lhs.clone(), false);
        let y = t.add_bcast(a, x)?;
        let m = t.mul(y, y)?;
        t.sum_all(m)
    });

    let lin_w = rand_tensor(&mut rng, &[3, 5], -0.7, 0.7);
    let lin_b = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    run("linear_x", GENERAL_TOL, rand_tensor(&mut rng, &[4, 5], -1.0, 1.0), &mut |t, x| {
        let w = t.leaf(lin_w.clone(), false);
        let b = t.leaf(lin_b.clone(), false);
        let y = t.linear(x, w, b)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    let lin_x = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    run("linear_w", GENERAL_TOL, rand_tensor(&mut rng, &[3, 5], -0.7, 0.7), &mut |t, w| {
        let x = t.leaf(lin_x.clone(), false);
        let b = t.leaf(lin_b.clone(), false);
        let y = t.linear(x, w, b)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    run("linear_b", GENERAL_TOL, rand_tensor(&mut rng, &[3], -0.5, 0.5), &mut |t, b| {
        let x = t.leaf(lin_x.clone(), false);
        let w = t.leaf(lin_w.clone(), false);
        let y = t.linear(x, w, b)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });

    let bmm_b = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
    run("bmm_a", GENERAL_TOL, rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0), &mut |t, a| {
        let b = t.leaf(bmm_b.clone(), false);
        let y = t.bmm(a, b, false)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    let bmm_a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    run("bmm_b_transposed", GENERAL_TOL, rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0), &mut |t, b| {
        let a = t.leaf(bmm_a.clone(), false);
        let y = t.bmm(a, b, true)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });

    let spec = ConvSpec::cubic(3, 1, 1, 2, 3);
    let conv_w = rand_tensor(&mut rng, &[3, 2, 3, 3, 3], -0.4, 0.4);
    let conv_b = rand_tensor(&mut rng, &[3], -0.2, 0.2);
    run("conv3d_x", GENERAL_TOL, rand_tensor(&mut rng, &[1, 2, 4, 4, 4], -1.0, 1.0), &mut |t, x| {
        let w = t.leaf(conv_w.clone(), false);
        let b = t.leaf(conv_b.clone(), false);
        let y = t.conv3d(x, w, b, &spec)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    let conv_x = rand_tensor(&mut rng, &[1, 2, 4, 4, 4], -1.0, 1.0);
    run("conv3d_w", GENERAL_TOL, rand_tensor(&mut rng, &[3, 2, 3, 3, 3], -0.4, 0.4), &mut |t, w| {
        let x = t.leaf(conv_x.clone(), false);
        let b = t.leaf(conv_b.clone(), false);
        let y = t.conv3d(x, w, b, &spec)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    run("conv3d_b", GENERAL_TOL, rand_tensor(&mut rng, &[3], -0.2, 0.2), &mut |t, b| {
        let x = t.leaf(conv_x.clone(), false);
        let w = t.leaf(conv_w.clone(), false);
        let y = t.conv3d(x, w, b, &spec)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    let strided = ConvSpec::cubic(2, 2, 0, 1, 2);
    let strided_w = rand_tensor(&mut rng, &[2, 1, 2, 2, 2], -0.5, 0.5);
    run("conv3d_strided_x", GENERAL_TOL, rand_tensor(&mut rng, &[2, 1, 4, 4, 4], -1.0, 1.0), &mut |t, x| {
        let w = t.leaf(strided_w.clone(), false);
        let b = t.leaf(Tensor::zeros(vec![2]), false);
        let y = t.conv3d(x, w, b, &strided)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });

    run("maxpool3d", GENERAL_TOL, rand_tensor(&mut rng, &[1, 2, 4, 4, 4], -1.0, 1.0), &mut |t, x| {
        let y = t.maxpool3d_cubic(x, 2, 2, 0)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    run("maxpool3d_padded", GENERAL_TOL, rand_tensor(&mut rng, &[1, 1, 5, 5, 5], -1.0, 1.0), &mut |t, x| {
        let y = t.maxpool3d_cubic(x, 3, 2, 1)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    run("avgpool3d", GENERAL_TOL, rand_tensor(&mut rng, &[1, 2, 4, 4, 4], -1.0, 1.0), &mut |t, x| {
        let y = t.avgpool3d(x, 2, 2)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    run("global_avgpool", GENERAL_TOL, rand_tensor(&mut rng, &[2, 3, 3, 3, 3], -1.0, 1.0), &mut |t, x| {
        let y = t.global_avgpool(x)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });

    let bn_gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
    let bn_beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
    run("batchnorm3d_train_x", GENERAL_TOL, rand_tensor(&mut rng, &[2, 3, 2, 2, 2], -1.0, 1.0), &mut |t, x| {
        let g = t.leaf(bn_gamma.clone(), false);
        let b = t.leaf(bn_beta.clone(), false);
        let mut stats = RunningStats::identity(3);
        let y = t.batchnorm3d(x, g, b, &mut stats, Mode::Train, 1e-5, 0.1)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    let bn_x = rand_tensor(&mut rng, &[2, 3, 2, 2, 2], -1.0, 1.0);
    run("batchnorm3d_train_gamma", GENERAL_TOL, rand_tensor(&mut rng, &[3], 0.5, 1.5), &mut |t, g| {
        let x = t.leaf(bn_x.clone(), false);
        let b = t.leaf(bn_beta.clone(), false);
        let mut stats = RunningStats::identity(3);
        let y = t.batchnorm3d(x, g, b, &mut stats, Mode::Train, 1e-5, 0.1)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    run("batchnorm3d_eval_x", GENERAL_TOL, rand_tensor(&mut rng, &[2, 3, 2, 2, 2], -1.0, 1.0), &mut |t, x| {
        let g = t.leaf(bn_gamma.clone(), false);
        let b = t.leaf(bn_beta.clone(), false);
        let mut stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![1.1, 0.9, 1.3] };
        let y = t.batchnorm3d(x, g, b, &mut stats, Mode::Eval, 1e-5, 0.1)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });

    let ln_gamma = rand_tensor(&mut rng, &[4], 0.5, 1.5);
    let ln_beta = rand_tensor(&mut rng, &[4], -0.5, 0.5);
    run("layernorm_x", GENERAL_TOL, rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), &mut |t, x| {
        let g = t.leaf(ln_gamma.clone(), false);
        let b = t.leaf(ln_beta.clone(), false);
        let y = t.layernorm(x, g, b, 1e-5)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
    let ln_x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    run("layernorm_gamma", GENERAL_TOL, rand_tensor(&mut rng, &[4], 0.5, 1.5), &mut |t, g| {
        let x = t.leaf(ln_x.clone(), false);
        let b = t.leaf(ln_beta.clone(), false);
        let y = t.layernorm(x, g, b, 1e-5)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });

    run("dropout_fixed_mask", ELEMWISE_TOL, rand_tensor(&mut rng, &[4, 4], -1.0, 1.0), &mut |t, x| {
        // reseed per call so the mask is a deterministic function of nothing
        let mut drng = ChaCha8Rng::seed_from_u64(99);
        let y = t.dropout(x, 0.4, Mode::Train, &mut drng)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });

    run("reshape_permute", ELEMWISE_TOL, rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0), &mut |t, x| {
        let p = t.permute(x, &[2, 0, 1])?;
        let r = t.reshape(p, vec![4, 6])?;
        let sq = t.mul(r, r)?;
        t.sum_all(sq)
    });
    run("narrow_concat", ELEMWISE_TOL, rand_tensor(&mut rng, &[3, 6], -1.0, 1.0), &mut |t, x| {
        let a = t.narrow(x, 1, 0, 2)?;
        let b = t.narrow(x, 1, 3, 3)?;
        let c = t.concat(&[b, a], 1)?;
        let sq = t.mul(c, c)?;
        t.sum_all(sq)
    });
    run("pad_roll", ELEMWISE_TOL, rand_tensor(&mut rng, &[3, 4], -1.0, 1.0), &mut |t, x| {
        let p = t.pad_zero(x, 0, 1, 2)?;
        let r = t.roll(p, &[2, -1])?;
        let sq = t.mul(r, r)?;
        t.sum_all(sq)
    });
    run("gather_rows", ELEMWISE_TOL, rand_tensor(&mut rng, &[5, 3], -1.0, 1.0), &mut |t, x| {
        let idx = Arc::new(vec![4u32, 0, 2, 4]);
        let g = t.gather_rows(x, &idx)?;
        let sq = t.mul(g, g)?;
        t.sum_all(sq)
    });
    run("mean_axis", ELEMWISE_TOL, rand_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0), &mut |t, x| {
        let m = t.mean_axis(x, 1)?;
        let sq = t.mul(m, m)?;
        t.sum_all(sq)
    });

    let bce_labels = vec![1.0, 0.0, 1.0, 1.0];
    run("bce_with_logits", ELEMWISE_TOL, rand_tensor(&mut rng, &[4, 1], -2.0, 2.0), &mut |t, z| {
        t.bce_with_logits(z, &bce_labels)
    });
    let mae_target = vec![0.3, -0.8, 1.4];
    run("mae_loss", ELEMWISE_TOL, rand_tensor(&mut rng, &[3, 1], 2.0, 3.0), &mut |t, p| {
        t.mae_loss(p, &mae_target)
    });

    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_function_has_tiny_error() {
        let x = Tensor::from_vec(vec![2, 3], vec![0.3, -0.7, 1.2, 0.05, -2.0, 0.9]).unwrap();
        let err = finite_diff_check(&mut |t, id| t.sum_all(id), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn sum_of_squares_error() {
        let x = Tensor::from_vec(vec![4], vec![1.0, -0.5, 2.0, 0.25]).unwrap();
        let err = finite_diff_check(
            &mut |t, id| {
                let sq = t.mul(id, id)?;
                t.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn non_scalar_function_rejected() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let r = finite_diff_check(&mut |t, id| t.relu(id), &x, 1e-5);
        assert!(matches!(r, Err(TensorError::Contract(_))));
    }

    #[test]
    fn every_op_passes_gradient_sweep() {
        for check in op_gradient_sweep() {
            assert!(
                check.passed(),
                "{}: rel err {} exceeds {}",
                check.name,
                check.max_rel_err,
                check.tolerance
            );
        }
    }
}
