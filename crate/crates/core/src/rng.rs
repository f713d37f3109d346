//! Seeded RNG streams.
//!
//! Every stochastic choice in the workbench draws from a ChaCha generator
//! derived from an experiment seed plus a purpose tag, so independent parts of
//! a run (data, init, batching, interventions) never share or race a stream.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Purpose tags keep streams disjoint even for equal seeds.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    DataWeights,
    DataSamples,
    ModelInit,
    Batching,
    ClubPermutation,
    Intervention,
    GradCheck,
    Metrics,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::DataWeights => 0x01,
            Stream::DataSamples => 0x02,
            Stream::ModelInit => 0x03,
            Stream::Batching => 0x04,
            Stream::ClubPermutation => 0x05,
            Stream::Intervention => 0x06,
            Stream::GradCheck => 0x07,
            Stream::Metrics => 0x08,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream.tag())))
}

/// Uniform random permutation of 0..n.
pub fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
