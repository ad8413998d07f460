//! Named, reproducible RNG streams.
//!
//! Every random draw in the artifact flows from one master seed through a
//! named sub-stream (data, init, noise, mask, batch order, ...), so ablations
//! can perturb exactly one stream while holding the rest fixed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over bytes. Stable across platforms and toolchain versions,
/// unlike std's DefaultHasher. Used for seed derivation and artifact
/// fingerprints; not collision-resistant against adversaries.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a master seed, a stream name, and an index.
pub fn derive_seed(master: u64, stream: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(16 + stream.len());
    buf.extend_from_slice(&master.to_le_bytes());
    buf.extend_from_slice(stream.as_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&buf)
}

/// ChaCha8 stream for a named sub-stream of the master seed.
pub fn stream_rng(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}
