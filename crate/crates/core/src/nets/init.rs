//! Parameter initialization: Kaiming-uniform fan-in for conv/linear weights,
//! truncated normal (σ = 0.02, cut at 2σ) for transformer weights and
//! position-bias tables, zeros for biases and beta, ones for gamma.

use crate::tensor::{numel, Element, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// What an initializer should do for one named parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    KaimingUniform { fan_in: usize },
    TruncNormal { std: f64 },
    Zeros,
    Ones,
}

pub fn materialize<E: Element>(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<E> {
    let n = numel(shape);
    let data: Vec<E> = match init {
        Init::KaimingUniform { fan_in } => {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| E::from_f64(rng.random_range(-bound..bound))).collect()
        }
        Init::TruncNormal { std } => (0..n).map(|_| E::from_f64(trunc_normal_sample(rng, std))).collect(),
        Init::Zeros => vec![E::ZERO; n],
        Init::Ones => vec![E::ONE; n],
    };
    Tensor::from_vec(shape.to_vec(), data).expect("init shape")
}

/// Box-Muller standard normal, resampled until it lands within two standard
/// deviations, then scaled.
fn trunc_normal_sample(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = materialize(Init::KaimingUniform { fan_in: 54 }, &[4, 2, 3, 3, 3], &mut rng);
        let bound = (6.0f64 / 54.0).sqrt();
        assert!(t.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn trunc_normal_cut_at_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Tensor<f64> = materialize(Init::TruncNormal { std: 0.02 }, &[1000], &mut rng);
        assert!(t.as_slice().iter().all(|v| v.abs() <= 0.04 + 1e-12));
        let mean: f64 = t.as_slice().iter().sum::<f64>() / 1000.0;
        assert!(mean.abs() < 0.005);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta: Tensor<f32> = materialize(Init::KaimingUniform { fan_in: 9 }, &[3, 3], &mut a);
        let tb: Tensor<f32> = materialize(Init::KaimingUniform { fan_in: 9 }, &[3, 3], &mut b);
        assert_eq!(ta.as_slice(), tb.as_slice());
    }
}
