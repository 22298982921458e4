//! Affine maps and batched matrix products.

use super::{Element, OpRecord, Result, Tape, Tensor, TensorError, TensorId};

impl<E: Element> Tape<E> {
    /// Affine map over the last axis: `x[..., F] · wᵀ[F, O] + b[O]`.
    /// `w` has shape `[O, F]` (one output row per output feature).
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let xshape = self.shape(x).to_vec();
        let wshape = self.shape(w).to_vec();
        let bshape = self.shape(b).to_vec();
        if xshape.is_empty() || wshape.len() != 2 || bshape.len() != 1 {
            return Err(TensorError::DimensionMismatch {
                op: "linear",
                detail: format!("x {xshape:?}, w {wshape:?}, b {bshape:?}"),
            });
        }
        let features = *xshape.last().unwrap();
        let (out_f, in_f) = (wshape[0], wshape[1]);
        if in_f != features || bshape[0] != out_f {
            return Err(TensorError::DimensionMismatch {
                op: "linear",
                detail: format!("x has {features} features, w is {wshape:?}, b is {bshape:?}"),
            });
        }
        let rows = self.value(x).numel() / features;
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![E::ZERO; rows * out_f];
        for r in 0..rows {
            let xrow = &xd[r * features..(r + 1) * features];
            let orow = &mut out[r * out_f..(r + 1) * out_f];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wrow = &wd[o * features..(o + 1) * features];
                let mut acc = E::ZERO;
                for (xi, wi) in xrow.iter().zip(wrow) {
                    acc += *xi * *wi;
                }
                *slot = acc + bd[o];
            }
        }
        let mut out_shape = xshape;
        *out_shape.last_mut().unwrap() = out_f;
        let value = Tensor::from_vec(out_shape, out)?;
        self.push_op(value, OpRecord::Linear { x, w, b }, "linear")
    }

    /// Batched matrix product over the last two axes. `a` is `[..., M, K]`;
    /// `b` is `[..., K, N]`, or `[..., N, K]` with `transpose_b`. Leading
    /// axes must match exactly.
    pub fn bmm(&mut self, a: TensorId, b: TensorId, transpose_b: bool) -> Result<TensorId> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if ashape.len() < 2 || ashape.len() != bshape.len() || ashape[..ashape.len() - 2] != bshape[..bshape.len() - 2]
        {
            return Err(TensorError::DimensionMismatch {
                op: "bmm",
                detail: format!("{ashape:?} vs {bshape:?}"),
            });
        }
        let rank = ashape.len();
        let (m, k) = (ashape[rank - 2], ashape[rank - 1]);
        let (bk, n) = if transpose_b {
            (bshape[rank - 1], bshape[rank - 2])
        } else {
            (bshape[rank - 2], bshape[rank - 1])
        };
        if bk != k {
            return Err(TensorError::DimensionMismatch {
                op: "bmm",
                detail: format!("inner extents {k} vs {bk}"),
            });
        }
        let batch: usize = ashape[..rank - 2].iter().product();
        let ad = self.data(a);
        let bd = self.data(b);
        let mut out = vec![E::ZERO; batch * m * n];
        for bi in 0..batch {
            let abase = bi * m * k;
            let bbase = bi * k * n;
            let obase = bi * m * n;
            for i in 0..m {
                for j in 0..n {
                    let mut acc = E::ZERO;
                    if transpose_b {
                        let arow = &ad[abase + i * k..abase + (i + 1) * k];
                        let brow = &bd[bbase + j * k..bbase + (j + 1) * k];
                        for (x, y) in arow.iter().zip(brow) {
                            acc += *x * *y;
                        }
                    } else {
                        for p in 0..k {
                            acc += ad[abase + i * k + p] * bd[bbase + p * n + j];
                        }
                    }
                    out[obase + i * n + j] = acc;
                }
            }
        }
        let mut out_shape = ashape.clone();
        out_shape[rank - 2] = m;
        out_shape[rank - 1] = n;
        let value = Tensor::from_vec(out_shape, out)?;
        self.push_op(value, OpRecord::Bmm { a, b, transpose_b }, "bmm")
    }
}

pub(crate) fn linear_backward<E: Element>(
    tape: &Tape<E>,
    grad: &[E],
    x: TensorId,
    w: TensorId,
    b: TensorId,
    grads: &mut [Option<Vec<E>>],
) {
    let features = *tape.shape(x).last().unwrap();
    let out_f = tape.shape(w)[0];
    let rows = tape.value(x).numel() / features;
    let xd = tape.data(x);
    let wd = tape.data(w);
    if tape.requires_grad(x) {
        ensure(grads, x, tape);
        let buf = grads[x].as_mut().unwrap();
        for r in 0..rows {
            let grow = &grad[r * out_f..(r + 1) * out_f];
            let xrow = &mut buf[r * features..(r + 1) * features];
            for (o, &g) in grow.iter().enumerate() {
                let wrow = &wd[o * features..(o + 1) * features];
                for (xs, &ws) in xrow.iter_mut().zip(wrow) {
                    *xs += g * ws;
                }
            }
        }
    }
    if tape.requires_grad(w) {
        ensure(grads, w, tape);
        let buf = grads[w].as_mut().unwrap();
        for r in 0..rows {
            let grow = &grad[r * out_f..(r + 1) * out_f];
            let xrow = &xd[r * features..(r + 1) * features];
            for (o, &g) in grow.iter().enumerate() {
                let wrow = &mut buf[o * features..(o + 1) * features];
                for (ws, &xs) in wrow.iter_mut().zip(xrow) {
                    *ws += g * xs;
                }
            }
        }
    }
    if tape.requires_grad(b) {
        ensure(grads, b, tape);
        let buf = grads[b].as_mut().unwrap();
        for r in 0..rows {
            let grow = &grad[r * out_f..(r + 1) * out_f];
            for (slot, &g) in buf.iter_mut().zip(grow) {
                *slot += g;
            }
        }
    }
}

pub(crate) fn bmm_backward<E: Element>(
    tape: &Tape<E>,
    grad: &[E],
    a: TensorId,
    b: TensorId,
    transpose_b: bool,
    grads: &mut [Option<Vec<E>>],
) {
    let ashape = tape.shape(a).to_vec();
    let bshape = tape.shape(b).to_vec();
    let rank = ashape.len();
    let (m, k) = (ashape[rank - 2], ashape[rank - 1]);
    let n = if transpose_b { bshape[rank - 2] } else { bshape[rank - 1] };
    let batch: usize = ashape[..rank - 2].iter().product();
    let ad = tape.data(a);
    let bd = tape.data(b);
    if tape.requires_grad(a) {
        ensure(grads, a, tape);
        let buf = grads[a].as_mut().unwrap();
        // dA = dY · Bᵀ (or dY · B when B was transposed)
        for bi in 0..batch {
            let gbase = bi * m * n;
            let bbase = bi * k * n;
            let abase = bi * m * k;
            for i in 0..m {
                for p in 0..k {
                    let mut acc = E::ZERO;
                    for j in 0..n {
                        let bval = if transpose_b { bd[bbase + j * k + p] } else { bd[bbase + p * n + j] };
                        acc += grad[gbase + i * n + j] * bval;
                    }
                    buf[abase + i * k + p] += acc;
                }
            }
        }
    }
    if tape.requires_grad(b) {
        ensure(grads, b, tape);
        let buf = grads[b].as_mut().unwrap();
        for bi in 0..batch {
            let gbase = bi * m * n;
            let bbase = bi * k * n;
            let abase = bi * m * k;
            if transpose_b {
                // Y = A·Bᵀ, so dB = dYᵀ·A with dB shaped [n, k]
                for j in 0..n {
                    for p in 0..k {
                        let mut acc = E::ZERO;
                        for i in 0..m {
                            acc += grad[gbase + i * n + j] * ad[abase + i * k + p];
                        }
                        buf[bbase + j * k + p] += acc;
                    }
                }
            } else {
                // dB = Aᵀ·dY shaped [k, n]
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = E::ZERO;
                        for i in 0..m {
                            acc += ad[abase + i * k + p] * grad[gbase + i * n + j];
                        }
                        buf[bbase + p * n + j] += acc;
                    }
                }
            }
        }
    }
}

fn ensure<E: Element>(grads: &mut [Option<Vec<E>>], id: TensorId, tape: &Tape<E>) {
    if grads[id].is_none() {
        grads[id] = Some(vec![E::ZERO; tape.value(id).numel()]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_weight_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let w = tape.leaf(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(t(&[3], &[0.0, 0.0, 0.0]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).as_slice(), tape.value(x).as_slice());
    }

    #[test]
    fn linear_small_case() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let w = tape.leaf(t(&[1, 2], &[1.0, 1.0]), false);
        let b = tape.leaf(t(&[1], &[1.0]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[4.0]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (rows, f, o) = (5, 4, 3);
        let xv: Vec<f64> = (0..rows * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..o * f).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..o).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut expect = vec![0.0f64; rows * o];
        for r in 0..rows {
            for j in 0..o {
                let mut acc = bv[j];
                for p in 0..f {
                    acc += xv[r * f + p] * wv[j * f + p];
                }
                expect[r * o + j] = acc;
            }
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[rows, f], &xv), false);
        let w = tape.leaf(t(&[o, f], &wv), false);
        let b = tape.leaf(t(&[o], &bv), false);
        let y = tape.linear(x, w, b).unwrap();
        for (got, want) in tape.value(y).as_slice().iter().zip(&expect) {
            let rel = (got - want).abs() / (1e-12 + got.abs() + want.abs());
            assert!(rel < 1e-6);
        }
    }

    #[test]
    fn bmm_plain_and_transposed_agree() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let b = tape.leaf(t(&[1, 3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]), false);
        let y = tape.bmm(a, b, false).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored as [2, 3]
        let bt = tape.permute(b, &[0, 2, 1]).unwrap();
        let y2 = tape.bmm(a, bt, true).unwrap();
        assert_eq!(tape.value(y2).as_slice(), tape.value(y).as_slice());
    }
}
