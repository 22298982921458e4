//! Batch normalization, layer normalization and inverted dropout.

use super::{BnSaved, Element, LnSaved, OpRecord, Result, Tape, Tensor, TensorError, TensorId};
use rand::Rng;
use std::sync::Arc;

/// Per-channel running statistics owned by the network, updated in train
/// mode by exponential moving average with biased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<E> {
    pub mean: Vec<E>,
    pub var: Vec<E>,
}

impl<E: Element> RunningStats<E> {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![E::ZERO; channels], var: vec![E::ONE; channels] }
    }
}

/// Whether a forward pass uses batch statistics and consumes dropout RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl<E: Element> Tape<E> {
    /// Batch normalization over `[N, C, D, H, W]`, per channel.
    ///
    /// Train mode normalizes by batch statistics (biased variance over
    /// N·D·H·W) and updates `stats` in place by
    /// `running = (1−momentum)·running + momentum·batch`. Eval mode
    /// normalizes by the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm3d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        stats: &mut RunningStats<E>,
        mode: Mode,
        eps: E,
        momentum: E,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(TensorError::DimensionMismatch {
                op: "batchnorm3d",
                detail: format!("x must be 5-D, got {xs:?}"),
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial = xs[2] * xs[3] * xs[4];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::DimensionMismatch {
                op: "batchnorm3d",
                detail: format!("gamma/beta/stats must have length C={c}"),
            });
        }
        if eps <= E::ZERO {
            return Err(TensorError::Contract("batchnorm eps must be positive".into()));
        }
        let m = E::from_f64((n * spatial) as f64);
        let xd = self.data(x);
        let chan = spatial;
        let sample = c * spatial;

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![E::ZERO; c];
                let mut var = vec![E::ZERO; c];
                for ci in 0..c {
                    let mut acc = E::ZERO;
                    for ni in 0..n {
                        let base = ni * sample + ci * chan;
                        for &v in &xd[base..base + chan] {
                            acc += v;
                        }
                    }
                    let mu = acc / m;
                    let mut vacc = E::ZERO;
                    for ni in 0..n {
                        let base = ni * sample + ci * chan;
                        for &v in &xd[base..base + chan] {
                            let dv = v - mu;
                            vacc += dv * dv;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = vacc / m;
                }
                for ci in 0..c {
                    stats.mean[ci] = (E::ONE - momentum) * stats.mean[ci] + momentum * mean[ci];
                    stats.var[ci] = (E::ONE - momentum) * stats.var[ci] + momentum * var[ci];
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };

        let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![E::ZERO; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = ni * sample + ci * chan;
                let (mu, is, g, b) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
                for k in 0..chan {
                    out[base + k] = (xd[base + k] - mu) * is * g + b;
                }
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        let saved = BnSaved { mean, inv_std };
        self.push_op(
            value,
            OpRecord::BatchNorm { x, gamma, beta, eps, saved, train: mode == Mode::Train },
            "batchnorm3d",
        )
    }

    /// Layer normalization over the last axis of any-rank input.
    pub fn layernorm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: E) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let c = *xs.last().ok_or_else(|| TensorError::DimensionMismatch {
            op: "layernorm",
            detail: "x must have at least one axis".into(),
        })?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::DimensionMismatch {
                op: "layernorm",
                detail: format!("gamma/beta must have length {c}"),
            });
        }
        let rows = self.value(x).numel() / c;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let inv_c = E::ONE / E::from_f64(c as f64);
        let mut out = vec![E::ZERO; xd.len()];
        let mut means = vec![E::ZERO; rows];
        let mut inv_stds = vec![E::ZERO; rows];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mut mu = E::ZERO;
            for &v in row {
                mu += v;
            }
            mu *= inv_c;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var *= inv_c;
            let is = E::ONE / (var + eps).sqrt();
            means[r] = mu;
            inv_stds[r] = is;
            let orow = &mut out[r * c..(r + 1) * c];
            for (k, slot) in orow.iter_mut().enumerate() {
                *slot = (row[k] - mu) * is * gd[k] + bd[k];
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        let saved = LnSaved { mean: means, inv_std: inv_stds };
        self.push_op(value, OpRecord::LayerNorm { x, gamma, beta, saved }, "layernorm")
    }

    /// Inverted dropout: train mode zeroes units with probability `p` and
    /// scales survivors by `1/(1−p)`; eval mode is the identity.
    pub fn dropout(&mut self, x: TensorId, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout p must be in [0, 1), got {p}")));
        }
        if mode == Mode::Eval || p == 0.0 {
            let value = self.value(x).clone();
            return self.push_op(value, OpRecord::Reshape { a: x }, "dropout");
        }
        let keep_scale = E::from_f64(1.0 / (1.0 - p));
        let mask: Vec<E> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { E::ZERO } else { keep_scale })
            .collect();
        let out: Vec<E> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(self.shape(x).to_vec(), out)?;
        self.push_op(value, OpRecord::Dropout { x, mask: Arc::new(mask) }, "dropout")
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<E: Element>(
    tape: &Tape<E>,
    grad: &[E],
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    eps: E,
    saved: &BnSaved<E>,
    train: bool,
    grads: &mut [Option<Vec<E>>],
) {
    let _ = eps;
    let xs = tape.shape(x);
    let (n, c) = (xs[0], xs[1]);
    let spatial = xs[2] * xs[3] * xs[4];
    let chan = spatial;
    let sample = c * chan;
    let m = E::from_f64((n * spatial) as f64);
    let xd = tape.data(x);
    let gd = tape.data(gamma);

    // Per-channel reductions of dy and dy·x̂.
    let mut sum_dy = vec![E::ZERO; c];
    let mut sum_dy_xhat = vec![E::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = ni * sample + ci * chan;
            let (mu, is) = (saved.mean[ci], saved.inv_std[ci]);
            let mut s = E::ZERO;
            let mut sx = E::ZERO;
            for k in 0..chan {
                let g = grad[base + k];
                s += g;
                sx += g * (xd[base + k] - mu) * is;
            }
            sum_dy[ci] += s;
            sum_dy_xhat[ci] += sx;
        }
    }

    if tape.requires_grad(beta) {
        if grads[beta].is_none() {
            grads[beta] = Some(vec![E::ZERO; c]);
        }
        let db = grads[beta].as_mut().unwrap();
        for ci in 0..c {
            db[ci] += sum_dy[ci];
        }
    }
    if tape.requires_grad(gamma) {
        if grads[gamma].is_none() {
            grads[gamma] = Some(vec![E::ZERO; c]);
        }
        let dg = grads[gamma].as_mut().unwrap();
        for ci in 0..c {
            dg[ci] += sum_dy_xhat[ci];
        }
    }
    if tape.requires_grad(x) {
        if grads[x].is_none() {
            grads[x] = Some(vec![E::ZERO; tape.value(x).numel()]);
        }
        let dx = grads[x].as_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let base = ni * sample + ci * chan;
                let (mu, is, g) = (saved.mean[ci], saved.inv_std[ci], gd[ci]);
                if train {
                    // dx = γ·inv_std·(dy − mean(dy) − x̂·mean(dy·x̂))
                    let mean_dy = sum_dy[ci] / m;
                    let mean_dy_xhat = sum_dy_xhat[ci] / m;
                    for k in 0..chan {
                        let xhat = (xd[base + k] - mu) * is;
                        dx[base + k] += g * is * (grad[base + k] - mean_dy - xhat * mean_dy_xhat);
                    }
                } else {
                    // running stats are constants in eval mode
                    for k in 0..chan {
                        dx[base + k] += g * is * grad[base + k];
                    }
                }
            }
        }
    }
}

pub(crate) fn layernorm_backward<E: Element>(
    tape: &Tape<E>,
    grad: &[E],
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    saved: &LnSaved<E>,
    grads: &mut [Option<Vec<E>>],
) {
    let xs = tape.shape(x);
    let c = *xs.last().unwrap();
    let rows = tape.value(x).numel() / c;
    let xd = tape.data(x);
    let gd = tape.data(gamma);
    let inv_c = E::ONE / E::from_f64(c as f64);

    if tape.requires_grad(beta) {
        if grads[beta].is_none() {
            grads[beta] = Some(vec![E::ZERO; c]);
        }
        let db = grads[beta].as_mut().unwrap();
        for r in 0..rows {
            for k in 0..c {
                db[k] += grad[r * c + k];
            }
        }
    }
    if tape.requires_grad(gamma) {
        if grads[gamma].is_none() {
            grads[gamma] = Some(vec![E::ZERO; c]);
        }
        let dg = grads[gamma].as_mut().unwrap();
        for r in 0..rows {
            let (mu, is) = (saved.mean[r], saved.inv_std[r]);
            for k in 0..c {
                dg[k] += grad[r * c + k] * (xd[r * c + k] - mu) * is;
            }
        }
    }
    if tape.requires_grad(x) {
        if grads[x].is_none() {
            grads[x] = Some(vec![E::ZERO; tape.value(x).numel()]);
        }
        let dx = grads[x].as_mut().unwrap();
        for r in 0..rows {
            let (mu, is) = (saved.mean[r], saved.inv_std[r]);
            let mut mean_dyg = E::ZERO;
            let mut mean_dyg_xhat = E::ZERO;
            for k in 0..c {
                let dyg = grad[r * c + k] * gd[k];
                let xhat = (xd[r * c + k] - mu) * is;
                mean_dyg += dyg;
                mean_dyg_xhat += dyg * xhat;
            }
            mean_dyg *= inv_c;
            mean_dyg_xhat *= inv_c;
            for k in 0..c {
                let dyg = grad[r * c + k] * gd[k];
                let xhat = (xd[r * c + k] - mu) * is;
                dx[r * c + k] += is * (dyg - mean_dyg - xhat * mean_dyg_xhat);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn batchnorm_eval_identity_stats_is_identity() {
        let mut tape = Tape::<f64>::new();
        let data = [0.5, -0.25, 1.0, 0.0, 0.75, -1.0, 0.25, 0.125];
        let x = tape.leaf(t(&[1, 1, 2, 2, 2], &data), false);
        let gamma = tape.leaf(t(&[1], &[1.0]), false);
        let beta = tape.leaf(t(&[1], &[0.0]), false);
        let mut stats = RunningStats::identity(1);
        let y = tape
            .batchnorm3d(x, gamma, beta, &mut stats, Mode::Eval, 1e-5, 0.1)
            .unwrap();
        for (got, want) in tape.value(y).as_slice().iter().zip(&data) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_train_constant_batch_outputs_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![2, 2, 2, 2, 2], 3.0), false);
        let gamma = tape.leaf(t(&[2], &[2.0, 2.0]), false);
        let beta = tape.leaf(t(&[2], &[0.5, -0.5]), false);
        let mut stats = RunningStats::identity(2);
        let y = tape
            .batchnorm3d(x, gamma, beta, &mut stats, Mode::Train, 1e-5, 0.1)
            .unwrap();
        let out = tape.value(y).as_slice();
        // zero variance: the eps guard keeps it finite and output equals beta
        for ni in 0..2 {
            for ci in 0..2 {
                for k in 0..8 {
                    let v = out[ni * 16 + ci * 8 + k];
                    let want = if ci == 0 { 0.5 } else { -0.5 };
                    assert!((v - want).abs() < 1e-9);
                }
            }
        }
        // running stats moved toward batch stats
        assert!((stats.mean[0] - 0.3).abs() < 1e-12);
        assert!((stats.var[0] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn layernorm_rows() {
        let mut tape = Tape::<f64>::new();
        let gamma = tape.leaf(t(&[2], &[1.0, 1.0]), false);
        let beta = tape.leaf(t(&[2], &[0.25, 0.25]), false);
        // constant row normalizes to zero, output = beta
        let x = tape.leaf(t(&[1, 2], &[1.0, 1.0]), false);
        let y = tape.layernorm(x, gamma, beta, 1e-12).unwrap();
        for &v in tape.value(y).as_slice() {
            assert!((v - 0.25).abs() < 1e-9);
        }
        // [-1, 1] has unit population variance, so it is reproduced as eps -> 0
        let beta0 = tape.leaf(t(&[2], &[0.0, 0.0]), false);
        let x2 = tape.leaf(t(&[1, 2], &[-1.0, 1.0]), false);
        let y2 = tape.layernorm(x2, gamma, beta0, 1e-14).unwrap();
        let out = tape.value(y2).as_slice();
        assert!((out[0] + 1.0).abs() < 1e-6);
        assert!((out[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(vec![1000], 1.0), true);
        let e = tape.dropout(x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(e).as_slice(), tape.value(x).as_slice());
        let d = tape.dropout(x, 0.5, Mode::Train, &mut rng).unwrap();
        let out = tape.value(d).as_slice();
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = out.iter().filter(|&&v| v != 0.0).count();
        assert!(kept > 400 && kept < 600, "kept {kept} of 1000 at p=0.5");
    }
}
