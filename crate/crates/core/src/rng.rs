use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic, platform-stable generator for (seed, stream) pairs.
///
/// Every source of randomness in the crate draws from one of these streams so
/// that a run is reproducible from its seed alone. Distinct stream ids give
/// independent sequences for the same seed (weight init, rollout sampling,
/// control sampling, ...).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    // Mix so that (seed, stream) and (stream, seed) differ.
    key[16..24].copy_from_slice(&(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)).to_le_bytes());
    key[24..32].copy_from_slice(&(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9)).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
