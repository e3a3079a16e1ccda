//! Sub-seed derivation: one user-facing seed, one named stream per
//! pipeline stage, stable across platforms.

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the seed for a named stream from the run seed.
pub fn subseed(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ fnv1a(tag.as_bytes()))
}

/// Derive a seed for a named stream plus an index (per corpus, per task).
pub fn subseed_indexed(seed: u64, tag: &str, index: u64) -> u64 {
    splitmix64(subseed(seed, tag) ^ splitmix64(index))
}
