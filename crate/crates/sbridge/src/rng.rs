//! Counter-based RNG streams.
//!
//! Every stochastic routine draws from a ChaCha stream keyed by
//! `(seed, stream, substream)`, so a batch may be partitioned arbitrarily
//! (one stream per path) without changing any draw.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Derives an independent seed from a base seed and two labels; used to key
/// per-iteration and per-chunk randomness in the training loops.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(a)) ^ splitmix64(b.wrapping_mul(0x9e3779b97f4a7c15)))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A ChaCha generator keyed by `(seed, stream, substream)`.
pub fn stream_rng(seed: u64, stream: u64, substream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let words = [
        splitmix64(seed),
        splitmix64(seed ^ 0xa5a5_a5a5_a5a5_a5a5),
        splitmix64(stream.wrapping_add(0x51ed_270b_a4c9_57ef)),
        splitmix64(stream ^ substream.rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15),
    ];
    for (i, w) in words.iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Standard-normal matrix with one independent stream per row (path).
pub fn normal_rows(seed: u64, substream: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let mut rng = stream_rng(seed, i as u64, substream);
        for j in 0..cols {
            out[[i, j]] = rng.sample(StandardNormal);
        }
    }
    out
}
