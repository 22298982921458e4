//! Densely connected 3D network: a strided stem, dense blocks whose layers
//! each see the concatenation of every earlier feature map, compressing
//! transitions, and a global-average-pooled linear head.

use super::{NetError, Plan, Result};
use crate::tensor::{conv_out_extent, ConvSpec, Element, Mode, RunningStats, Tape, TensorId};
use std::collections::BTreeMap;

const BOTTLENECK_FACTOR: usize = 4;

pub(super) fn plan(
    input_extent: usize,
    growth: usize,
    depths: &[usize],
    init_features: usize,
    compression: f64,
) -> Result<Plan> {
    if growth < 1 {
        return Err(NetError::Config("densenet growth must be >= 1".into()));
    }
    if !(compression > 0.0 && compression <= 1.0) {
        return Err(NetError::Config(format!("compression {compression} outside (0, 1]")));
    }
    if depths.is_empty() || depths.contains(&0) {
        return Err(NetError::Config("densenet needs non-empty positive depths".into()));
    }
    let mut plan = Plan::new();
    plan.conv("stem.conv", init_features, 1, 7);
    plan.bn("stem.bn", init_features);

    let mut extent = conv_out_extent(input_extent, 7, 2, 3).map_err(collapse)?;
    extent = conv_out_extent(extent, 3, 2, 1).map_err(collapse)?; // stem maxpool

    let mut channels = init_features;
    for (b, &depth) in depths.iter().enumerate() {
        for l in 0..depth {
            let prefix = format!("block{}.layer{}", b + 1, l + 1);
            let cin = channels + l * growth;
            plan.bn(&format!("{prefix}.bn1"), cin);
            plan.conv(&format!("{prefix}.conv1"), BOTTLENECK_FACTOR * growth, cin, 1);
            plan.bn(&format!("{prefix}.bn2"), BOTTLENECK_FACTOR * growth);
            plan.conv(&format!("{prefix}.conv2"), growth, BOTTLENECK_FACTOR * growth, 3);
        }
        channels += depth * growth;
        if b + 1 < depths.len() {
            let prefix = format!("trans{}", b + 1);
            let cout = ((channels as f64) * compression).floor() as usize;
            if cout < 1 {
                return Err(NetError::Geometry("transition compressed channels below one".into()));
            }
            plan.bn(&format!("{prefix}.bn"), channels);
            plan.conv(&format!("{prefix}.conv"), cout, channels, 1);
            channels = cout;
            if extent < 2 {
                return Err(NetError::Geometry(format!(
                    "spatial extent collapsed before transition {} (input {input_extent})",
                    b + 1
                )));
            }
            extent = (extent - 2) / 2 + 1; // avgpool 2/2
        }
    }
    plan.bn("final_bn", channels);
    plan.linear("head", 1, channels);
    Ok(plan)
}

fn collapse(e: crate::tensor::TensorError) -> NetError {
    NetError::Geometry(e.to_string())
}

#[allow(clippy::too_many_arguments)]
pub(super) fn forward<E: Element>(
    tape: &mut Tape<E>,
    x: TensorId,
    ids: &BTreeMap<String, TensorId>,
    buffers: &mut BTreeMap<String, RunningStats<E>>,
    growth: usize,
    depths: &[usize],
    init_features: usize,
    compression: f64,
    mode: Mode,
) -> Result<TensorId> {
    let eps = E::from_f64(1e-5);
    let momentum = E::from_f64(0.1);
    let bn = |tape: &mut Tape<E>, h: TensorId, prefix: &str, buffers: &mut BTreeMap<String, RunningStats<E>>| {
        let stats = buffers.get_mut(prefix).expect("bn buffer");
        tape.batchnorm3d(h, ids[&format!("{prefix}.gamma")], ids[&format!("{prefix}.beta")], stats, mode, eps, momentum)
    };
    let conv = |tape: &mut Tape<E>, h: TensorId, name: &str, spec: &ConvSpec| {
        let zero_bias = tape.constant(crate::tensor::Tensor::zeros(vec![spec.out_channels]));
        tape.conv3d(h, ids[&format!("{name}.weight")], zero_bias, spec)
    };

    // stem
    let mut h = conv(tape, x, "stem.conv", &ConvSpec::cubic(7, 2, 3, 1, init_features))?;
    h = bn(tape, h, "stem.bn", buffers)?;
    h = tape.relu(h)?;
    h = tape.maxpool3d_cubic(h, 3, 2, 1)?;

    let mut channels = init_features;
    for (b, &depth) in depths.iter().enumerate() {
        let mut features: Vec<TensorId> = vec![h];
        for l in 0..depth {
            let prefix = format!("block{}.layer{}", b + 1, l + 1);
            let cin = channels + l * growth;
            let cat = if features.len() == 1 { features[0] } else { tape.concat(&features, 1)? };
            let mut t = bn(tape, cat, &format!("{prefix}.bn1"), buffers)?;
            t = tape.relu(t)?;
            t = conv(tape, t, &format!("{prefix}.conv1"), &ConvSpec::cubic(1, 1, 0, cin, BOTTLENECK_FACTOR * growth))?;
            t = bn(tape, t, &format!("{prefix}.bn2"), buffers)?;
            t = tape.relu(t)?;
            t = conv(tape, t, &format!("{prefix}.conv2"), &ConvSpec::cubic(3, 1, 1, BOTTLENECK_FACTOR * growth, growth))?;
            features.push(t);
        }
        h = tape.concat(&features, 1)?;
        channels += depth * growth;
        if b + 1 < depths.len() {
            let prefix = format!("trans{}", b + 1);
            let cout = ((channels as f64) * compression).floor() as usize;
            h = bn(tape, h, &format!("{prefix}.bn"), buffers)?;
            h = tape.relu(h)?;
            h = conv(tape, h, &format!("{prefix}.conv"), &ConvSpec::cubic(1, 1, 0, channels, cout))?;
            h = tape.avgpool3d(h, 2, 2)?;
            channels = cout;
        }
    }
    h = bn(tape, h, "final_bn", buffers)?;
    h = tape.relu(h)?;
    let pooled = tape.global_avgpool(h)?;
    let out = tape.linear(pooled, ids["head.weight"], ids["head.bias"])?;
    Ok(out)
}

/// Channel count after each dense block, by the concatenation bookkeeping
/// `entry + depth·growth` with compressing transitions in between.
pub fn channel_trace(growth: usize, depths: &[usize], init_features: usize, compression: f64) -> Vec<usize> {
    let mut channels = init_features;
    let mut out = Vec::new();
    for (b, &depth) in depths.iter().enumerate() {
        channels += depth * growth;
        out.push(channels);
        if b + 1 < depths.len() {
            channels = ((channels as f64) * compression).floor() as usize;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{NetConfig, Network, Task};
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> NetConfig {
        NetConfig::Densenet3d {
            input_extent: 32,
            growth: 4,
            depths: vec![1, 1],
            init_features: None,
            compression: 0.5,
            task: Task::Sex,
        }
    }

    #[test]
    fn tiny_forward_shape_contract() {
        let mut net = Network::<f32>::build(tiny(), 42).unwrap();
        let x = Tensor::full(vec![1, 1, 32, 32, 32], 0.2);
        let out = net.predict(x).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn channel_bookkeeping_matches_definition() {
        // entry 8, one layer of growth 4 -> 12; compress to 6; block 2 -> 10
        assert_eq!(channel_trace(4, &[1, 1], 8, 0.5), vec![12, 10]);
        assert_eq!(channel_trace(32, &[6, 12, 24, 16], 64, 0.5), vec![256, 512, 1024, 1024]);
    }

    #[test]
    fn two_layer_block_matches_unrolled_reference() {
        // A dense block must equal the explicitly unrolled concat/conv graph.
        use crate::tensor::Tape;
        
        let cfg = NetConfig::Densenet3d {
            input_extent: 32,
            growth: 2,
            depths: vec![2],
            init_features: Some(4),
            compression: 0.5,
            task: Task::Sex,
        };
        let mut net = Network::<f64>::build(cfg, 9).unwrap();
        let x = Tensor::from_vec(
            vec![1, 1, 32, 32, 32],
            (0..32768).map(|i| ((i * 37 % 101) as f64) / 101.0 - 0.5).collect(),
        )
        .unwrap();
        let got = net.predict(x.clone()).unwrap();

        // unrolled reference: replay the exact op sequence by hand
        let mut tape = Tape::<f64>::no_grad();
        let xid = tape.leaf(x, false);
        let ids: BTreeMap<String, TensorId> =
            net.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), false))).collect();
        let mut bufs = net.buffers.clone();
        let eps = 1e-5;
        let mom = 0.1;
        let bn = |tape: &mut Tape<f64>, h: TensorId, prefix: &str, bufs: &mut BTreeMap<String, RunningStats<f64>>| {
            let stats = bufs.get_mut(prefix).unwrap();
            tape.batchnorm3d(h, ids[&format!("{prefix}.gamma")], ids[&format!("{prefix}.beta")], stats, Mode::Eval, eps, mom)
                .unwrap()
        };
        let conv = |tape: &mut Tape<f64>, h: TensorId, name: &str, spec: &ConvSpec| {
            let zb = tape.constant(Tensor::zeros(vec![spec.out_channels]));
            tape.conv3d(h, ids[&format!("{name}.weight")], zb, spec).unwrap()
        };
        let mut h = conv(&mut tape, xid, "stem.conv", &ConvSpec::cubic(7, 2, 3, 1, 4));
        h = bn(&mut tape, h, "stem.bn", &mut bufs);
        h = tape.relu(h).unwrap();
        h = tape.maxpool3d_cubic(h, 3, 2, 1).unwrap();
        let x0 = h;
        // layer 1 sees x0
        let mut t = bn(&mut tape, x0, "block1.layer1.bn1", &mut bufs);
        t = tape.relu(t).unwrap();
        t = conv(&mut tape, t, "block1.layer1.conv1", &ConvSpec::cubic(1, 1, 0, 4, 8));
        t = bn(&mut tape, t, "block1.layer1.bn2", &mut bufs);
        t = tape.relu(t).unwrap();
        let x1 = conv(&mut tape, t, "block1.layer1.conv2", &ConvSpec::cubic(3, 1, 1, 8, 2));
        // layer 2 sees concat(x0, x1)
        let cat01 = tape.concat(&[x0, x1], 1).unwrap();
        let mut u = bn(&mut tape, cat01, "block1.layer2.bn1", &mut bufs);
        u = tape.relu(u).unwrap();
        u = conv(&mut tape, u, "block1.layer2.conv1", &ConvSpec::cubic(1, 1, 0, 6, 8));
        u = bn(&mut tape, u, "block1.layer2.bn2", &mut bufs);
        u = tape.relu(u).unwrap();
        let x2 = conv(&mut tape, u, "block1.layer2.conv2", &ConvSpec::cubic(3, 1, 1, 8, 2));
        let all = tape.concat(&[x0, x1, x2], 1).unwrap();
        let mut f = bn(&mut tape, all, "final_bn", &mut bufs);
        f = tape.relu(f).unwrap();
        let pooled = tape.global_avgpool(f).unwrap();
        let expect = tape.linear(pooled, ids["head.weight"], ids["head.bias"]).unwrap();
        let want = tape.value(expect).as_slice()[0];
        assert!((got[0] - want).abs() < 1e-5, "got {} want {want}", got[0]);
    }
}
