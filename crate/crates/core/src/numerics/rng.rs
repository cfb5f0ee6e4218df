//! Seeded generators. Every stochastic call site takes one of these explicitly.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, stream)`; used to give each task / module
/// its own reproducible generator regardless of call order elsewhere.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut Rng, std: f64) -> f64 {
    Normal::new(0.0, std).expect("std is finite and non-negative").sample(rng)
}

/// Normal sample redrawn until it lies within two standard deviations.
pub fn trunc_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let x = normal(rng, 1.0);
        if x.abs() <= 2.0 {
            return x * std;
        }
    }
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Fisher–Yates shuffle driven by `rng`.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
