#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stan_core::{Scalar, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random<S: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::cast(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn max_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Adds uniform noise in `[-scale, scale)` to every parameter so that
/// zero-initialized residual branches become active.
pub fn perturb<S: Scalar>(params: &mut stan_core::model::Params<S>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in params.values_mut() {
        for v in t.data_mut() {
            *v += S::cast(r.random_range(-scale..scale));
        }
    }
}

/// `n` distinct-enough random `(input 0, flat index)` coordinates.
pub fn coords(len: usize, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut r = rng(seed);
    (0..n).map(|_| (0, r.random_range(0..len))).collect()
}
