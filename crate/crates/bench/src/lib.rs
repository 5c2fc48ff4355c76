//! Seeded inputs shared by the benchmarks.

use mx_core::minifloat::FloatSpec;
use mx_core::mx::MxVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// `n` standard normal samples.
pub fn normal_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Two MX vectors quantized from independent normal samples.
pub fn mx_pair(elem: FloatSpec, block: usize, n: usize, seed: u64) -> (MxVector, MxVector) {
    let a = MxVector::from_slice(elem, block, &normal_values(n, seed)).expect("positive block");
    let b = MxVector::from_slice(elem, block, &normal_values(n, seed ^ 0x9e37_79b9)).expect("positive block");
    (a, b)
}

/// Every code of `spec` that decodes to a finite value.
pub fn finite_codes(spec: &FloatSpec) -> Vec<u16> {
    spec.codes().filter(|&c| spec.decode(c).is_finite()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inputs_are_seeded() {
        assert_eq!(normal_values(8, 3), normal_values(8, 3));
        assert_ne!(normal_values(8, 3), normal_values(8, 4));
        let (a, b) = mx_pair(FloatSpec::E4M3, 32, 100, 1);
        assert_eq!((a.len(), b.len()), (100, 100));
        assert_eq!(finite_codes(&FloatSpec::E4M3).len(), 254);
    }
}
