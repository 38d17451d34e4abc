//! Counter-based random number generation.
//!
//! Every random quantity in this crate is a pure function of a seed and a few
//! integer coordinates (round index, item id, repetition, ...). This makes
//! simulations reproducible bit-for-bit regardless of evaluation order or of
//! how work is sharded across threads: there is no generator state to share.
//!
//! The mixer is the SplitMix64 finalizer applied to a small absorb-permute
//! sponge over the input words. It is not cryptographic; it is a statistical
//! PRF good enough for Monte Carlo work.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a seed with coordinate words into a single pseudo-random `u64`.
pub fn mix(seed: u64, words: &[u64]) -> u64 {
    let mut state = splitmix(seed ^ GAMMA);
    for &w in words {
        state = splitmix(state ^ w.wrapping_mul(GAMMA).wrapping_add(GAMMA));
    }
    state
}

/// Derives a child seed from a parent seed and a stream tag.
pub fn derive(seed: u64, tag: u64) -> u64 {
    mix(seed, &[tag])
}

/// Uniform draw in `[0, 1)` keyed by `(seed, words)`.
pub fn unit_f64(seed: u64, words: &[u64]) -> f64 {
    // 53 high bits -> [0, 1) with full double precision.
    (mix(seed, words) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `{0, 1, ..., bound-1}` keyed by `(seed, words)`.
///
/// Uses the multiply-shift method; the modulo bias is at most `bound / 2^64`,
/// negligible for the small bounds used here.
pub fn below(seed: u64, words: &[u64], bound: u64) -> u64 {
    debug_assert!(bound > 0);
    ((mix(seed, words) as u128 * bound as u128) >> 64) as u64
}

/// Samples `k` distinct values from `{0, ..., n-1}`, keyed by `(seed, words)`.
///
/// Floyd's algorithm: deterministic for a given key and independent of any
/// global state. The output is sorted.
pub fn sample_distinct(seed: u64, words: &[u64], n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "cannot sample {k} distinct values from {n}");
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut key = words.to_vec();
    key.push(0);
    for j in (n - k)..n {
        *key.last_mut().unwrap() = j as u64;
        let r = below(seed, &key, j as u64 + 1) as usize;
        if chosen.contains(&r) {
            chosen.push(j);
        } else {
            chosen.push(r);
        }
    }
    chosen.sort_unstable();
    chosen
}
