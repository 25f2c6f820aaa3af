//! Seeded randomness. Every consumer draws from a named sub-stream of one
//! run seed, so adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Independent generator for `(seed, name, path...)`.
pub fn stream(seed: u64, name: &str, path: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

pub fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    (0..n).map(|_| dist.sample(rng)).collect()
}
