//! Whole-network gradient verification against central finite differences.
//!
//! Runs in 64-bit and in train mode so batch-norm batch statistics are part
//! of the differentiated graph. Configs under test must have zero dropout;
//! a randomized forward has no well-defined finite difference.

use super::{Network, Result, Task};
use crate::tensor::{Mode, Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn loss_node(tape: &mut Tape<f64>, task: Task, out: TensorId, labels: &[f64]) -> crate::tensor::Result<TensorId> {
    match task {
        Task::Sex | Task::BinaryGeneric => tape.bce_with_logits(out, labels),
        Task::Age => tape.mae_loss(out, labels),
    }
}

fn forward_loss(net: &mut Network<f64>, input: &Tensor<f64>, labels: &[f64]) -> Result<f64> {
    let buffers = net.buffers.clone();
    let mut tape = Tape::no_grad();
    let x = tape.leaf(input.clone(), false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = net.forward(&mut tape, x, Mode::Train, &mut rng)?;
    let loss = loss_node(&mut tape, net.config.task(), pass.output, labels)?;
    let v = tape.value(loss).as_slice()[0];
    net.buffers = buffers;
    Ok(v)
}

/// Largest relative error over a seeded random subsample of parameter
/// coordinates, comparing the tape gradient against
/// `(L(θ+h) − L(θ−h)) / 2h`.
pub fn param_finite_diff_check(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    labels: &[f64],
    samples: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let buffers = net.buffers.clone();
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone(), false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = net.forward(&mut tape, x, Mode::Train, &mut rng)?;
    let loss = loss_node(&mut tape, net.config.task(), pass.output, labels)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = pass
        .param_ids
        .iter()
        .map(|(name, &id)| (name.clone(), grads.get(id).map(|g| g.to_vec()).unwrap_or_default()))
        .collect();
    drop(tape);
    net.buffers = buffers;

    let total: usize = net.params.values().map(|t| t.numel()).sum();
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let mut flat = pick_rng.random_range(0..total);
        let (name, offset) = {
            let mut found = None;
            for (name, t) in &net.params {
                if flat < t.numel() {
                    found = Some((name.clone(), flat));
                    break;
                }
                flat -= t.numel();
            }
            found.expect("index within total")
        };
        let a = analytic.iter().find(|(n, _)| *n == name).map(|(_, g)| g[offset]).unwrap_or(0.0);
        let original = net.params[&name].as_slice()[offset];
        net.params.get_mut(&name).unwrap().make_mut()[offset] = original + h;
        let fp = forward_loss(net, input, labels)?;
        net.params.get_mut(&name).unwrap().make_mut()[offset] = original - h;
        let fm = forward_loss(net, input, labels)?;
        net.params.get_mut(&name).unwrap().make_mut()[offset] = original;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (a - numeric).abs() / 1e-12f64.max(a.abs() + numeric.abs());
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Finite-difference check of the gradient with respect to the input image,
/// using the full forward pass reduced to a scalar by the task loss.
pub fn input_finite_diff_check(net: &mut Network<f64>, input: &Tensor<f64>, labels: &[f64], h: f64) -> Result<f64> {
    let labels = labels.to_vec();
    let buffers = net.buffers.clone();
    let task = net.config.task();
    let err = crate::tensor::gradcheck::finite_diff_check(
        &mut |tape: &mut Tape<f64>, x: TensorId| {
            net.buffers = buffers.clone();
            let pass = net.forward(tape, x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0)).map_err(to_tensor_err)?;
            loss_node(tape, task, pass.output, &labels)
        },
        input,
        h,
    )?;
    net.buffers = buffers;
    Ok(err)
}

fn to_tensor_err(e: super::NetError) -> crate::tensor::TensorError {
    match e {
        super::NetError::Tensor(t) => t,
        other => crate::tensor::TensorError::Contract(other.to_string()),
    }
}

/// Desk-scale configs used by the gradient checks: small enough that one
/// forward costs well under a millisecond in 64-bit.
pub fn gradcheck_configs() -> Vec<super::NetConfig> {
    use super::{NetConfig, Task};
    vec![
        NetConfig::Sfcn { input_extent: 8, channels: vec![2, 3], task: Task::Sex, dropout_p: 0.0 },
        NetConfig::Densenet3d {
            input_extent: 16,
            growth: 2,
            depths: vec![1, 1],
            init_features: Some(4),
            compression: 0.5,
            task: Task::Age,
        },
        NetConfig::Swin3d {
            input_extent: 8,
            patch: 2,
            window: 2,
            depths: vec![2, 1],
            dims: vec![4, 8],
            heads: vec![1, 2],
            task: Task::Sex,
        },
    ]
}

/// Batch of random volumes plus matching labels for a config's task.
pub fn gradcheck_batch(config: &super::NetConfig, batch: usize, seed: u64) -> (Tensor<f64>, Vec<f64>) {
    let e = config.input_extent();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..batch * e * e * e).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::from_vec(vec![batch, 1, e, e, e], data).unwrap();
    let labels: Vec<f64> = match config.task() {
        Task::Sex | Task::BinaryGeneric => (0..batch).map(|i| (i % 2) as f64).collect(),
        Task::Age => (0..batch).map(|_| rng.random_range(40.0..70.0)).collect(),
    };
    (x, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_architectures_pass_param_finite_diff() {
        for cfg in gradcheck_configs() {
            let mut net = Network::<f64>::build(cfg.clone(), 17).unwrap();
            let (x, labels) = gradcheck_batch(&cfg, 2, 3);
            let err = param_finite_diff_check(&mut net, &x, &labels, 40, 1e-5, 99).unwrap();
            assert!(err < 1e-4, "{}: rel err {err}", cfg.arch_name());
        }
    }

    #[test]
    fn sfcn_tiny_input_gradient_passes() {
        let cfg = gradcheck_configs().remove(0);
        let mut net = Network::<f64>::build(cfg.clone(), 23).unwrap();
        let (x, labels) = gradcheck_batch(&cfg, 1, 7);
        let err = input_finite_diff_check(&mut net, &x, &labels, 1e-5).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
