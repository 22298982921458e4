//! Adam with bias-corrected moment estimates, no weight decay.

use crate::tensor::{Element, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators per parameter name, plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

/// One optimizer step over every parameter that received a gradient.
/// Parameters without a gradient entry are left untouched and their
/// moments still decay.
pub fn adam_step<E: Element>(
    params: &mut BTreeMap<String, Tensor<E>>,
    grads: &BTreeMap<String, Vec<E>>,
    state: &mut AdamState,
    lr: f64,
    hyper: AdamParams,
) {
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for (name, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let zero = vec![];
        let g: &[E] = grads.get(name).map(|g| g.as_slice()).unwrap_or(&zero);
        let data = tensor.make_mut();
        for i in 0..n {
            let gi = if g.is_empty() { 0.0 } else { g[i].to_f64() };
            let mi = hyper.beta1 * m[i] as f64 + (1.0 - hyper.beta1) * gi;
            let vi = hyper.beta2 * v[i] as f64 + (1.0 - hyper.beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + hyper.eps);
            data[i] = E::from_f64(data[i].to_f64() - update);
        }
    }
}
