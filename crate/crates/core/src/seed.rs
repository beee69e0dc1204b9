//! Labeled seed derivation.
//!
//! A single master seed fans out to per-stage seeds by hashing the stage
//! label into the master value. Adding a stage never perturbs the seeds of
//! existing stages, and no wall-clock entropy is involved anywhere.

/// Derives a child seed from `master` and a stage label.
///
/// Stable across runs and platforms: FNV-1a over the label bytes mixed
/// into the master seed with a SplitMix64 finalizer.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
