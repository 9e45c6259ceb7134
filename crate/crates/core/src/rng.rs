//! Deterministic random streams.
//!
//! Every consumer draws from its own ChaCha8 stream keyed by `(seed, stream)`.
//! ChaCha is counter based, so streams are independent and a stream's output
//! does not depend on how many values other streams consumed. This is what
//! lets columns be processed in parallel without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids used by the simulation harness and the rate experiment.
pub mod streams {
    pub const TRUTHS: u64 = 1;
    pub const SPLIT: u64 = 2;
    /// Column `x` samples from `COLUMN_SAMPLES + x`.
    pub const COLUMN_SAMPLES: u64 = 1 << 20;
    /// Replication `r` of rate record `i` uses `RATE_REPLICATIONS + (i << 32) + r`.
    pub const RATE_REPLICATIONS: u64 = 1 << 40;
}

pub fn stream(seed: u64, id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
