//! Seed derivation.
//!
//! Every random stream in the pipeline is derived from a single top-level
//! seed, a purpose tag and an index:
//!
//! ```text
//! sub_seed(seed, stream, index) = splitmix64(splitmix64(seed ^ stream.tag()) ^ index)
//! ```
//!
//! where `splitmix64` is the finalizer of Steele, Lea and Flood's SplitMix64
//! generator (golden-gamma increment followed by the two xor-shift-multiply
//! rounds). Each sub-seed initialises a ChaCha8 generator; Gaussian variates
//! come from the ziggurat sampler of `rand_distr::StandardNormal`.
//!
//! Streams carry distinct 64-bit tags so training, test and noise draws never
//! share a sub-seed for the same top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    /// Initial conditions of training trajectories.
    TrainingIc,
    /// Initial conditions of held-out test trajectories.
    TestIc,
    /// Stochastic forcing of ensemble members.
    EnsembleNoise,
}

impl Stream {
    pub fn tag(self) -> u64 {
        match self {
            Stream::TrainingIc => 0x7472_6169_6e69_6e67, // "training"
            Stream::TestIc => 0x7465_7374_5f69_6373,     // "test_ics"
            Stream::EnsembleNoise => 0x656e_735f_6e6f_6973, // "ens_nois"
        }
    }
}

/// SplitMix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sub_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ stream.tag()) ^ index)
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream, index))
}
