//! Simple fully convolutional network: a stack of conv3³–batchnorm–maxpool–
//! relu blocks, a final conv1³–batchnorm–relu block, then global average
//! pooling, dropout, and a one-output linear head.

use super::{NetError, Plan, Result};
use crate::tensor::{ConvSpec, Element, Mode, RunningStats, Tape, TensorId};
use rand::Rng;
use std::collections::BTreeMap;

pub(super) fn plan(input_extent: usize, channels: &[usize], dropout_p: f64) -> Result<Plan> {
    if channels.is_empty() {
        return Err(NetError::Config("sfcn needs at least one stage".into()));
    }
    if channels.contains(&0) {
        return Err(NetError::Config("sfcn channels must be positive".into()));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(NetError::Config(format!("dropout_p {dropout_p} outside [0, 1)")));
    }
    let stages = channels.len();
    let mut extent = input_extent;
    for s in 0..stages.saturating_sub(1) {
        extent /= 2;
        if extent < 1 {
            return Err(NetError::Geometry(format!(
                "extent collapsed below one voxel at stage {} (input {input_extent})",
                s + 1
            )));
        }
    }
    let mut plan = Plan::new();
    let mut cin = 1usize;
    for (s, &cout) in channels.iter().enumerate() {
        let k = if s + 1 < stages { 3 } else { 1 };
        let prefix = format!("stage{}", s + 1);
        plan.conv(&format!("{prefix}.conv"), cout, cin, k);
        plan.bn(&format!("{prefix}.bn"), cout);
        cin = cout;
    }
    plan.linear("head", 1, cin);
    Ok(plan)
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward<E: Element, R: Rng>(
    tape: &mut Tape<E>,
    x: TensorId,
    ids: &BTreeMap<String, TensorId>,
    buffers: &mut BTreeMap<String, RunningStats<E>>,
    channels: &[usize],
    dropout_p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<TensorId> {
    let stages = channels.len();
    let mut h = x;
    let mut cin = 1usize;
    for (s, &cout) in channels.iter().enumerate() {
        let last = s + 1 == stages;
        let prefix = format!("stage{}", s + 1);
        let k = if last { 1 } else { 3 };
        let spec = ConvSpec::cubic(k, 1, if last { 0 } else { 1 }, cin, cout);
        let zero_bias = tape.constant(crate::tensor::Tensor::zeros(vec![cout]));
        h = tape.conv3d(h, ids[&format!("{prefix}.conv.weight")], zero_bias, &spec)?;
        let stats = buffers.get_mut(&format!("{prefix}.bn")).expect("bn buffer");
        h = tape.batchnorm3d(
            h,
            ids[&format!("{prefix}.bn.gamma")],
            ids[&format!("{prefix}.bn.beta")],
            stats,
            mode,
            E::from_f64(1e-5),
            E::from_f64(0.1),
        )?;
        if !last {
            h = tape.maxpool3d_cubic(h, 2, 2, 0)?;
        }
        h = tape.relu(h)?;
        cin = cout;
    }
    let pooled = tape.global_avgpool(h)?;
    let dropped = tape.dropout(pooled, dropout_p, mode, rng)?;
    let out = tape.linear(dropped, ids["head.weight"], ids["head.bias"])?;
    Ok(out)
}

/// Independent shape accounting used by tests: the closed-form parameter
/// count of an SFCN config.
pub fn expected_param_count(channels: &[usize]) -> usize {
    let stages = channels.len();
    let mut total = 0usize;
    let mut cin = 1usize;
    for (s, &cout) in channels.iter().enumerate() {
        let k: usize = if s + 1 < stages { 3 } else { 1 };
        total += cout * cin * k * k * k; // conv weight, no bias before bn
        total += 2 * cout; // gamma + beta
        cin = cout;
    }
    total + cin + 1 // head weight + bias
}
