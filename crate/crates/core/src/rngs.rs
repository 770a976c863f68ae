//! Named, seeded random sub-streams.
//!
//! Every random draw in a run comes from a ChaCha stream keyed by the run seed
//! plus a stream name (and optional counters), so two runs can share exactly
//! the streams they need to share.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Matrix;

pub type StreamRng = ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Counter-based stream: a pure function of `(seed, name, a, b)`.
pub fn keyed(seed: u64, name: &str, a: u64, b: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn substream(seed: u64, name: &str) -> StreamRng {
    keyed(seed, name, 0, 0)
}

/// Uniform entries in `[-scale, scale]`.
pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}

pub fn random_vector(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..=scale)).collect()
}
