//! Seeded random substreams.
//!
//! Every consumer of randomness draws from its own ChaCha stream selected by
//! `(seed, domain, index)`. Gradient noise and compute-time sampling live in
//! different domains, so delays are independent of the data noise by
//! construction, and worker `m`'s noise does not depend on how arrivals
//! interleave.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent families of streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// Stochastic-gradient noise, one stream per worker.
    Noise,
    /// Compute-time sampling, one stream per worker.
    ComputeTime,
    /// Problem data generation.
    Data,
    /// Output selection (random-index rules).
    Output,
    /// Seeds used by the invariant suite and sweeps to enumerate configs.
    Harness,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::Noise => 0x6e6f_6973_6500_0001,
            Domain::ComputeTime => 0x7469_6d65_0000_0002,
            Domain::Data => 0x6461_7461_0000_0003,
            Domain::Output => 0x6f75_7470_7574_0004,
            Domain::Harness => 0x6861_726e_6573_0005,
        }
    }
}

/// splitmix64 finalizer, used only to decorrelate `(seed, domain)` pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream `index` of `domain` under `seed`.
pub fn substream(seed: u64, domain: Domain, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ domain.tag()));
    rng.set_stream(index);
    rng
}

/// One stream per worker.
pub fn worker_streams(seed: u64, domain: Domain, workers: usize) -> Vec<SimRng> {
    (0..workers as u64).map(|m| substream(seed, domain, m)).collect()
}
