//! Named, independent random streams.
//!
//! Every consumer of randomness asks for a stream by purpose; the stream seed is
//! `sha256(global_seed || purpose)`, so adding a new consumer never shifts the
//! draws of an existing one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, purpose: &str) -> StreamRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed, for components that take a plain `u64`.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    stream(seed, purpose).random()
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Resolves the effective global seed: `PVA_SEED` overrides the configured value.
pub fn seed_from_env(configured: u64) -> u64 {
    std::env::var("PVA_SEED")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(configured)
}
