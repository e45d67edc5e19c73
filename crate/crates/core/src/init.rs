//! Deterministic, seed-driven weight initialization.

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::real::Real;
use crate::tensor::Tensor;

/// SplitMix64 finalizer; derives independent stream seeds from (seed, salt).
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a parameter name, used to give every tensor its own
/// stream so adding a layer never perturbs the others.
pub fn name_salt(name: &str) -> u64 {
    name.bytes()
        .fold(0xCBF2_9CE4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

pub struct Initializer {
    seed: u64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { seed }
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name_salt(name)))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<F: Real>(&self, name: &str, shape: &[usize], bound: f64) -> Tensor<F> {
        let mut rng = self.rng_for(name);
        Tensor::from_fn(shape, |_| F::lit(rng.gen_range(-bound..=bound)))
    }

    /// He-uniform for a layer with the given fan-in: bound `sqrt(6 / fan_in)`.
    pub fn fan_in<F: Real>(&self, name: &str, shape: &[usize], fan_in: usize) -> Tensor<F> {
        self.uniform(name, shape, (6.0 / fan_in as f64).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_values_and_names_decorrelate() {
        let a: Tensor<f32> = Initializer::new(42).fan_in("w", &[8], 4);
        let b: Tensor<f32> = Initializer::new(42).fan_in("w", &[8], 4);
        let c: Tensor<f32> = Initializer::new(42).fan_in("v", &[8], 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f32 / 4.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
