//! Deterministic random streams.
//!
//! Every stochastic component draws from a ChaCha stream keyed by a base seed
//! and a small tuple of indices, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

// Stream domains keep independent subsystems from sharing keys.
pub const DOMAIN_MALA: u64 = 1;
pub const DOMAIN_INIT: u64 = 2;
pub const DOMAIN_IS: u64 = 3;
pub const DOMAIN_SIM: u64 = 4;
pub const DOMAIN_SPLIT: u64 = 5;
pub const DOMAIN_ISE: u64 = 6;
pub const DOMAIN_MOMENTS: u64 = 7;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a seed with a sequence of keys into a single 64-bit value.
pub fn mix(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Random stream keyed by `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    let a = mix(seed, keys);
    let b = splitmix64(a ^ 0xA5A5_A5A5_A5A5_A5A5);
    let c = splitmix64(b);
    let d = splitmix64(c);
    let mut bytes = [0u8; 32];
    for (chunk, word) in bytes.chunks_exact_mut(8).zip([a, b, c, d]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: f64 = stream(7, &[1, 2]).random();
        let b: f64 = stream(7, &[1, 2]).random();
        let c: f64 = stream(7, &[2, 1]).random();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_ne!(a.to_bits(), c.to_bits());
    }
}
