//! Stateless seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha generator seeded
//! through this function, so runs are reproducible and resumable: a stream id
//! and an index are mixed into the base seed (splitmix64 steps), and
//! consumers never carry generator state across units of work.

/// Derives an independent seed for (`stream`, `index`) under `base`.
pub fn derive(base: u64, stream: u64, index: u64) -> u64 {
    let mut x = base;
    for word in [stream, index] {
        x = x.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(word);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        x ^= x >> 31;
    }
    x
}
