//! Deterministic RNG plumbing.
//!
//! Every stochastic stage derives its generator from a labeled root seed so
//! reruns are bit-reproducible and parallel units (studies, frames, voxels)
//! draw from independent counter-addressed streams rather than a shared
//! sequential one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a child seed from `base` and a purpose label.
///
/// SHA-256 over the little-endian seed bytes followed by the label; the first
/// eight digest bytes form the child. Distinct labels give independent seeds
/// regardless of how callers nest derivations.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has at least 8 bytes"))
}

/// Root generator for a seed.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream-addressed generator: same seed, independent stream per index.
///
/// Streams are the counter-based contract used for per-frame and per-study
/// parallelism; generation order across streams never affects the draws.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}
