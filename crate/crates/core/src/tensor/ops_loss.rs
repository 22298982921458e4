//! Loss heads recorded as single tape nodes: numerically safe binary
//! cross-entropy on logits, and mean absolute error.

use super::{ops_elem::sigmoid_scalar, Element, OpRecord, Result, Tape, Tensor, TensorError, TensorId};
use std::sync::Arc;

impl<E: Element> Tape<E> {
    /// Mean over the batch of `log(1 + exp(−(2y−1)·z))`, computed in the
    /// overflow-safe form `max(z,0) − z·y + log(1 + exp(−|z|))`.
    /// Labels must be exactly 0 or 1.
    pub fn bce_with_logits(&mut self, logits: TensorId, labels: &[E]) -> Result<TensorId> {
        let n = self.value(logits).numel();
        if labels.len() != n {
            return Err(TensorError::DimensionMismatch {
                op: "bce_with_logits",
                detail: format!("{n} logits vs {} labels", labels.len()),
            });
        }
        if labels.iter().any(|&y| y != E::ZERO && y != E::ONE) {
            return Err(TensorError::Contract("bce labels must be binary".into()));
        }
        let zd = self.data(logits);
        let mut acc = E::ZERO;
        for (&z, &y) in zd.iter().zip(labels) {
            let zmax = z.maximum(E::ZERO);
            acc += zmax - z * y + (E::ONE + (-z.abs()).exp()).ln();
        }
        let loss = acc / E::from_f64(n as f64);
        self.push_op(
            Tensor::scalar(loss),
            OpRecord::BceWithLogits { logits, labels: Arc::new(labels.to_vec()) },
            "bce_with_logits",
        )
    }

    /// Mean absolute error; the subgradient at zero difference is zero.
    pub fn mae_loss(&mut self, pred: TensorId, target: &[E]) -> Result<TensorId> {
        let n = self.value(pred).numel();
        if target.len() != n {
            return Err(TensorError::DimensionMismatch {
                op: "mae_loss",
                detail: format!("{n} predictions vs {} targets", target.len()),
            });
        }
        let pd = self.data(pred);
        let mut acc = E::ZERO;
        for (&p, &t) in pd.iter().zip(target) {
            acc += (p - t).abs();
        }
        let loss = acc / E::from_f64(n as f64);
        self.push_op(
            Tensor::scalar(loss),
            OpRecord::MaeLoss { pred, target: Arc::new(target.to_vec()) },
            "mae_loss",
        )
    }
}

pub(crate) fn bce_backward<E: Element>(buf: &mut [E], gout: E, logits: &[E], labels: &[E]) {
    let inv_n = E::ONE / E::from_f64(logits.len() as f64);
    for ((slot, &z), &y) in buf.iter_mut().zip(logits).zip(labels) {
        *slot += gout * inv_n * (sigmoid_scalar(z) - y);
    }
}

pub(crate) fn mae_backward<E: Element>(buf: &mut [E], gout: E, pred: &[E], target: &[E]) {
    let inv_n = E::ONE / E::from_f64(pred.len() as f64);
    for ((slot, &p), &t) in buf.iter_mut().zip(pred).zip(target) {
        let sign = if p > t {
            E::ONE
        } else if p < t {
            -E::ONE
        } else {
            E::ZERO
        };
        *slot += gout * inv_n * sign;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[1, 1], &[0.0]), true);
        let loss = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!((tape.value(loss).as_slice()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(z).unwrap()[0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn bce_extreme_logit_is_finite_and_tiny() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[1, 1], &[-1000.0]), false);
        let loss = tape.bce_with_logits(z, &[0.0]).unwrap();
        let v = tape.value(loss).as_slice()[0];
        assert!(v.is_finite());
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(t(&[2, 1], &[0.0, 0.0]), false);
        assert!(matches!(tape.bce_with_logits(z, &[0.5, 1.0]), Err(TensorError::Contract(_))));
    }

    #[test]
    fn mae_values_and_sign_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[2, 1], &[2.0, 4.0]), true);
        let loss = tape.mae_loss(p, &[1.0, 2.0]).unwrap();
        assert!((tape.value(loss).as_slice()[0] - 1.5).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap(), &[0.5, 0.5]);

        let mut tape2 = Tape::<f64>::new();
        let q = tape2.leaf(t(&[3, 1], &[1.0, 5.0, 3.0]), true);
        let loss2 = tape2.mae_loss(q, &[1.0, 2.0, 4.0]).unwrap();
        let grads2 = tape2.backward(loss2).unwrap();
        // tie -> 0, above -> +1/3, below -> -1/3
        let g = grads2.get(q).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((g[2] + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mae_zero_when_equal() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(t(&[2, 1], &[1.5, -2.0]), false);
        let loss = tape.mae_loss(p, &[1.5, -2.0]).unwrap();
        assert_eq!(tape.value(loss).as_slice()[0], 0.0);
    }
}
