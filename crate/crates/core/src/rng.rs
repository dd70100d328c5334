//! Seed derivation and seeded generators.
//!
//! Every stochastic path takes an explicit `u64` seed. Child seeds are
//! derived by hashing `(parent, stream, index)` so that parallel work can
//! be scheduled in any order without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named sub-streams so that different consumers of one master seed never
/// share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    InitialState = 1,
    ObservationNoise = 2,
    Episode = 3,
    Member = 4,
    Batch = 5,
    Bootstrap = 6,
    Direction = 7,
    Init = 8,
    Evaluation = 9,
}

pub fn derive(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(stream as u64)) ^ index)
}

pub fn standard_normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
