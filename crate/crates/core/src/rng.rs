//! Deterministic stream derivation. Every random draw in the simulator comes
//! from a stream keyed by (global seed, domain label, indices), so agents and
//! rounds can be evaluated in any order, or concurrently, with bit-identical
//! results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derives an independent RNG stream from the global seed, a domain label,
/// and a list of indices (round, participant, ...).
pub fn stream(global_seed: u64, domain: &str, indices: &[u64]) -> ChaCha12Rng {
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update([domain.len() as u8]);
    hasher.update(domain.as_bytes());
    for ix in indices {
        hasher.update(ix.to_le_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha12Rng::from_seed(digest)
}
