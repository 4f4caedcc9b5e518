//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! one run seed, so adding draws to one component never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named substreams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Corpus,
    Init,
    Shuffle,
    Queries,
    Codes,
    Reseed,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Corpus => 1,
            Stream::Init => 2,
            Stream::Shuffle => 3,
            Stream::Queries => 4,
            Stream::Codes => 5,
            Stream::Reseed => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

pub fn normal(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    rng.sample(rand_distr::StandardNormal)
}
