//! Shared fixtures for the co-attention benchmarks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refseg_core::tensor::{Result, Tape, Var};

/// Deterministic uniform(−1,1) leaf.
pub fn random_leaf<'t>(
    tape: &'t Tape,
    shape: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Var<'t>> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    tape.leaf(shape, data)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
