//! Splittable seed derivation.
//!
//! All randomness in the pipeline flows from a single `u64` seed. Sub-streams
//! are derived by mixing the parent seed with a namespace tag and an index
//! through the SplitMix64 finalizer, so every case, patch, and displacement
//! field has its own independent, replayable stream:
//!
//! ```text
//! base seed ── CASE(epoch, index) ──► case seed ── PATCH(i) ──► patch stream
//!                                               └─ FIELD(i) ──► field stream
//! ```
//!
//! Streams are consumed through `ChaCha8Rng`, which is counter-based and
//! platform-independent.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Namespace tags for derived streams. Values are arbitrary but frozen:
/// changing them changes every synthesized case.
pub mod tag {
    /// Patch-count draw within one case.
    pub const PATCH_COUNT: u64 = 0x01;
    /// Geometry (kind, center, half-extents) of patch `i`.
    pub const PATCH_GEOM: u64 = 0x02;
    /// Displacement field of patch `i`.
    pub const PATCH_FIELD: u64 = 0x03;
    /// Retry `k` of a failed synthesis attempt.
    pub const SYNTH_RETRY: u64 = 0x04;
    /// Per-(epoch, case) training seed.
    pub const TRAIN_CASE: u64 = 0x05;
    /// Model parameter initialization.
    pub const MODEL_INIT: u64 = 0x06;
    /// Phantom generation retry.
    pub const PHANTOM_RETRY: u64 = 0x07;
    /// Per-index phantom in a generated dataset.
    pub const PHANTOM_CASE: u64 = 0x08;
    /// Per-index ablation base seed.
    pub const ABLATION_SEED: u64 = 0x09;
    /// Held-out evaluation case.
    pub const EVAL_CASE: u64 = 0x0a;
}

/// SplitMix64 finalizer; bijective on `u64`.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a list of tags/indices.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    let mut state = mix(base);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    state
}

/// RNG for a derived stream.
pub fn rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, tags))
}
