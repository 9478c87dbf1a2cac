//! Deterministic seed derivation.
//!
//! All randomness in the crate flows from named streams derived from a base
//! seed with a splitmix64 mix. The stream constants below are part of the
//! reproducibility contract: changing them changes every generated scenario.

/// Named sub-streams of a scenario seed.
pub mod stream {
    pub const POSITIONS: u64 = 1;
    pub const ACTIVITY: u64 = 2;
    pub const CHANNELS: u64 = 3;
    pub const PILOTS: u64 = 4;
    pub const NOISE: u64 = 5;
    /// Per-trial scenario seeds in the experiment harness.
    pub const TRIAL: u64 = 100;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent stream seed from `(base, stream)`.
pub fn derive(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ stream.wrapping_mul(GOLDEN))
}

/// Derive the seed for trial `index` of an experiment.
pub fn trial_seed(base: u64, index: usize) -> u64 {
    derive(derive(base, stream::TRIAL), index as u64)
}
