//! Elementwise and reduction operations.

use super::{numel, strides_of, Element, OpRecord, Result, Tape, Tensor, TensorError, TensorId};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

impl<E: Element> Tape<E> {
    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::DimensionMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let out: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), out)?;
        self.push_op(value, OpRecord::Add { a, b }, "add")
    }

    /// `a + broadcast(b)` where `b` broadcasts right-aligned up to `a`'s shape
    /// (missing leading axes count as 1).
    pub fn add_bcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let ashape = self.shape(a).to_vec();
        let bshape = self.shape(b).to_vec();
        if bshape.len() > ashape.len() {
            return Err(TensorError::DimensionMismatch {
                op: "add_bcast",
                detail: format!("rhs rank {} exceeds lhs rank {}", bshape.len(), ashape.len()),
            });
        }
        let offset = ashape.len() - bshape.len();
        for (i, &bd) in bshape.iter().enumerate() {
            let ad = ashape[offset + i];
            if bd != ad && bd != 1 {
                return Err(TensorError::DimensionMismatch {
                    op: "add_bcast",
                    detail: format!("{ashape:?} vs {bshape:?} at axis {}", offset + i),
                });
            }
        }
        let a_strides = strides_of(&ashape);
        let b_strides = strides_of(&bshape);
        let bdata = self.data(b);
        let mut out = self.data(a).to_vec();
        for (flat, v) in out.iter_mut().enumerate() {
            let mut bidx = 0usize;
            for (i, &bd) in bshape.iter().enumerate() {
                let coord = (flat / a_strides[offset + i]) % ashape[offset + i];
                if bd != 1 {
                    bidx += coord * b_strides[i];
                }
            }
            *v += bdata[bidx];
        }
        let value = Tensor::from_vec(ashape, out)?;
        self.push_op(value, OpRecord::AddBcast { a, b }, "add_bcast")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let out: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), out)?;
        self.push_op(value, OpRecord::Mul { a, b }, "mul")
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, a: TensorId, c: E) -> Result<TensorId> {
        let out: Vec<E> = self.data(a).iter().map(|&x| x * c).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), out)?;
        self.push_op(value, OpRecord::Scale { a, c }, "scale")
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<E> = self.data(a).iter().map(|&x| x.maximum(E::ZERO)).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), out)?;
        self.push_op(value, OpRecord::Relu { a }, "relu")
    }

    /// Exact-erf GELU: `x/2 · (1 + erf(x/√2))`.
    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| {
                let half = E::from_f64(0.5);
                x * half * (E::ONE + (x / E::from_f64(SQRT_2)).erf())
            })
            .collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), out)?;
        self.push_op(value, OpRecord::Gelu { a }, "gelu")
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<E> = self.data(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let value = Tensor::from_vec(self.shape(a).to_vec(), out)?;
        self.push_op(value, OpRecord::Sigmoid { a }, "sigmoid")
    }

    /// Softmax over one axis, computed with max subtraction for stability.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::DimensionMismatch {
                op: "softmax",
                detail: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let data = self.data(a);
        let mut out = vec![E::ZERO; data.len()];
        for_each_lane(&shape, axis, |base, stride, len| {
            let mut max = data[base];
            for k in 1..len {
                let v = data[base + k * stride];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::ZERO;
            for k in 0..len {
                let e = (data[base + k * stride] - max).exp();
                out[base + k * stride] = e;
                sum += e;
            }
            for k in 0..len {
                out[base + k * stride] /= sum;
            }
        });
        let value = Tensor::from_vec(shape, out)?;
        self.push_op(value, OpRecord::Softmax { a, axis }, "softmax")
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::DimensionMismatch {
                op: "mean_axis",
                detail: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let data = self.data(a);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = vec![E::ZERO; numel(&out_shape)];
        let inv = E::ONE / E::from_f64(shape[axis] as f64);
        let mut lane_idx = 0usize;
        for_each_lane(&shape, axis, |base, stride, len| {
            let mut sum = E::ZERO;
            for k in 0..len {
                sum += data[base + k * stride];
            }
            out[lane_idx] = sum * inv;
            lane_idx += 1;
        });
        let value = Tensor::from_vec(out_shape, out)?;
        self.push_op(value, OpRecord::MeanAxis { a, axis }, "mean_axis")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let mut sum = E::ZERO;
        for &v in self.data(a) {
            sum += v;
        }
        self.push_op(Tensor::scalar(sum), OpRecord::SumAll { a }, "sum_all")
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, E::ONE / E::from_f64(n as f64))
    }
}

pub(crate) fn sigmoid_scalar<E: Element>(x: E) -> E {
    // Split on sign so exp never overflows.
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

/// Visit every 1-D lane along `axis` of a row-major array: calls
/// `f(base_offset, stride, len)` once per lane, in row-major order of the
/// remaining axes.
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let strides = strides_of(shape);
    let len = shape[axis];
    let stride = strides[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * stride * len + i, stride, len);
        }
    }
}

// Backward helpers. All of them accumulate (+=) into `buf`.

pub(crate) fn acc_same<E: Element>(buf: &mut [E], grad: &[E]) {
    for (b, &g) in buf.iter_mut().zip(grad) {
        *b += g;
    }
}

pub(crate) fn acc_scaled<E: Element>(buf: &mut [E], grad: &[E], c: E) {
    for (b, &g) in buf.iter_mut().zip(grad) {
        *b += g * c;
    }
}

pub(crate) fn acc_mul<E: Element>(buf: &mut [E], grad: &[E], other: &[E]) {
    for ((b, &g), &o) in buf.iter_mut().zip(grad).zip(other) {
        *b += g * o;
    }
}

/// Reduce a gradient of `a`'s shape down onto broadcast operand `b` by
/// summing over the broadcast axes.
pub(crate) fn acc_bcast_reduce<E: Element>(buf: &mut [E], grad: &[E], ashape: &[usize], bshape: &[usize]) {
    let offset = ashape.len() - bshape.len();
    let a_strides = strides_of(ashape);
    let b_strides = strides_of(bshape);
    for (flat, &g) in grad.iter().enumerate() {
        let mut bidx = 0usize;
        for (i, &bd) in bshape.iter().enumerate() {
            if bd != 1 {
                let coord = (flat / a_strides[offset + i]) % ashape[offset + i];
                bidx += coord * b_strides[i];
            }
        }
        buf[bidx] += g;
    }
}

pub(crate) fn relu_backward<E: Element>(buf: &mut [E], grad: &[E], input: &[E]) {
    for ((b, &g), &x) in buf.iter_mut().zip(grad).zip(input) {
        if x > E::ZERO {
            *b += g;
        }
    }
}

pub(crate) fn gelu_backward<E: Element>(buf: &mut [E], grad: &[E], input: &[E]) {
    for ((b, &g), &x) in buf.iter_mut().zip(grad).zip(input) {
        let xf = x.to_f64();
        let phi = 0.5 * (1.0 + libm::erf(xf / SQRT_2));
        let pdf = INV_SQRT_2PI * (-0.5 * xf * xf).exp();
        *b += g * E::from_f64(phi + xf * pdf);
    }
}

pub(crate) fn sigmoid_backward<E: Element>(buf: &mut [E], grad: &[E], output: &[E]) {
    for ((b, &g), &s) in buf.iter_mut().zip(grad).zip(output) {
        *b += g * s * (E::ONE - s);
    }
}

pub(crate) fn softmax_backward<E: Element>(buf: &mut [E], grad: &[E], output: &[E], shape: &[usize], axis: usize) {
    for_each_lane(shape, axis, |base, stride, len| {
        let mut dot = E::ZERO;
        for k in 0..len {
            let i = base + k * stride;
            dot += grad[i] * output[i];
        }
        for k in 0..len {
            let i = base + k * stride;
            buf[i] += output[i] * (grad[i] - dot);
        }
    });
}

pub(crate) fn mean_axis_backward<E: Element>(buf: &mut [E], grad: &[E], in_shape: &[usize], axis: usize) {
    let inv = E::ONE / E::from_f64(in_shape[axis] as f64);
    let mut lane_idx = 0usize;
    for_each_lane(in_shape, axis, |base, stride, len| {
        let g = grad[lane_idx] * inv;
        lane_idx += 1;
        for k in 0..len {
            buf[base + k * stride] += g;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_gelu_sigmoid_softmax_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[4], &[-2.0, 3.0, 0.0, 1.0]), false);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).as_slice(), &[0.0, 3.0, 0.0, 1.0]);
        let g = tape.gelu(x).unwrap();
        assert!(tape.value(g).as_slice()[2].abs() < 1e-15);
        // gelu(1) equals the standard normal CDF at 1
        assert!((tape.value(g).as_slice()[3] - 0.8413447460685429).abs() < 1e-12);
        let s = tape.sigmoid(x).unwrap();
        assert!((tape.value(s).as_slice()[2] - 0.5).abs() < 1e-15);
        let sm_in = tape.leaf(t(&[1, 2], &[0.0, 0.0]), false);
        let sm = tape.softmax(sm_in, 1).unwrap();
        assert_eq!(tape.value(sm).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        use proptest::prelude::*;
        proptest!(ProptestConfig::with_cases(64), |(
            rows in 1usize..4,
            cols in 1usize..6,
            seed in 0u64..500,
            shift in -50.0f64..50.0,
        )| {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(t(&[rows, cols], &data), false);
            let s = tape.softmax(x, 1).unwrap();
            let out = tape.value(s).as_slice().to_vec();
            for r in 0..rows {
                let sum: f64 = out[r * cols..(r + 1) * cols].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            }
            // adding a constant to a row leaves the softmax unchanged
            let shifted: Vec<f64> = data.iter().map(|v| v + shift).collect();
            let xs = tape.leaf(t(&[rows, cols], &shifted), false);
            let ss = tape.softmax(xs, 1).unwrap();
            for (a, b) in out.iter().zip(tape.value(ss).as_slice()) {
                prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        });
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2], &[1000.0, 0.0]), false);
        let s = tape.softmax(x, 1).unwrap();
        let out = tape.value(s).as_slice();
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1].abs() < 1e-12);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sum_square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -1.0, 2.0, 7.0]), true);
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn fanout_accumulates_k_times() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s1 = tape.sum_all(x).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let s3 = tape.sum_all(x).unwrap();
        let a = tape.add(s1, s2).unwrap();
        let loss = tape.add(a, s3).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn detached_tensor_has_no_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.leaf(t(&[2], &[5.0, 5.0]), false);
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[5.0, 5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn add_bcast_reduces_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6]), false);
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let y = tape.add_bcast(a, b).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn nan_sweep_catches_inf() {
        let mut tape = Tape::<f64>::new().with_nan_sweep(true);
        let x = tape.leaf(t(&[1], &[1e308]), false);
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(TensorError::NonFinite { .. })));
    }
}
