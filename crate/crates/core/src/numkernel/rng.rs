use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;

use super::tensor::Tensor;

/// The crate-wide PRNG. Seeding goes through SplitMix64, so a `u64` seed fixes
/// every random draw of a run.
pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Normal(0, std²) samples truncated to ±2·std by rejection.
pub fn truncated_normal(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape product matches length")
}

/// Uniform samples in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape product matches length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a = truncated_normal(&mut seeded(7), &[4, 4], 0.02);
        let b = truncated_normal(&mut seeded(7), &[4, 4], 0.02);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.04));
    }
}
