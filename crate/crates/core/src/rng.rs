//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by the
//! run seed and positioned on a stream chosen by [`Stream`]. The stream id is
//! `(domain << 48) | index`, so dataset draws, fold shuffles, bootstrap
//! weights and Monte Carlo replicate seeds never share a stream. A bootstrap
//! replicate `b` always reads stream `Bootstrap(b)`, so serial and parallel
//! execution produce the same numbers.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Covariates, participation, treatment and outcome draws of a simulated dataset.
    Data,
    /// Fold assignment shuffles.
    Folds,
    /// Multiplier weights for bootstrap replicate `b`.
    Bootstrap(u64),
    /// Row resampling for nonparametric bootstrap replicate `b`.
    Resample(u64),
    /// Seed derivation for Monte Carlo replicate `r` of a validation run.
    Replicate(u64),
}

const INDEX_MASK: u64 = (1 << 48) - 1;

impl Stream {
    pub fn id(self) -> u64 {
        let (domain, index) = match self {
            Stream::Data => (1u64, 0u64),
            Stream::Folds => (2, 0),
            Stream::Bootstrap(b) => (3, b),
            Stream::Resample(b) => (4, b),
            Stream::Replicate(r) => (5, r),
        };
        (domain << 48) | (index & INDEX_MASK)
    }
}

/// Generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// Seed for Monte Carlo replicate `r` of a run seeded with `seed`.
pub fn replicate_seed(seed: u64, r: u64) -> u64 {
    stream_rng(seed, Stream::Replicate(r)).next_u64()
}
