//! Counter-based random streams.
//!
//! Every randomness consumer derives an independent ChaCha stream from a
//! `(seed, lane, epoch, batch)` key, so dropout masks, shuffles, and
//! negative sampling are reproducible regardless of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives the stream keyed by `(seed, lane, epoch, batch)`. Distinct keys
/// yield independent streams; identical keys replay identical draws.
pub fn stream(seed: u64, lane: u64, epoch: u64, batch: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&lane.to_le_bytes());
    key[16..24].copy_from_slice(&epoch.to_le_bytes());
    key[24..32].copy_from_slice(&batch.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// FNV-1a over a name, used to key per-tensor initialisation lanes without
/// depending on enumeration order or platform hashers.
pub fn name_lane(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
