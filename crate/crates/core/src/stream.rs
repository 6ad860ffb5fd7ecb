//! Deterministic seed derivation. Every random draw in the sandbox comes
//! from a ChaCha stream keyed by a hash of (global seed, purpose, ids),
//! so any output is a pure function of the seed and its inputs.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds the parts into a single stream seed.
pub(crate) fn stream_seed(parts: &[u64]) -> u64 {
    let mut h = GOLDEN;
    for &p in parts {
        h = mix64(h ^ mix64(p.wrapping_add(GOLDEN)));
    }
    h
}

/// Hash of a token prefix, including its length so that distinct prefixes
/// with shared heads do not collide trivially.
pub(crate) fn hash_tokens(tokens: &[usize]) -> u64 {
    let mut h = mix64((tokens.len() as u64).wrapping_add(GOLDEN));
    for &t in tokens {
        h = mix64(h.wrapping_add(mix64(t as u64 + 1)));
    }
    h
}
