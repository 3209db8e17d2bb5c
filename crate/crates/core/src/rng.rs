//! Deterministic random streams.
//!
//! Every random draw in a campaign derives from the single configured seed
//! plus a tuple of tags (stage, purpose, sample index, ...). Substreams are
//! independent of evaluation order, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Stream = ChaCha8Rng;

/// Purpose tags used when deriving substreams.
pub mod tag {
    pub const BOUND: u64 = 1;
    pub const TT_INIT: u64 = 2;
    pub const TT_KICK: u64 = 3;
    pub const TT_HOLDOUT: u64 = 4;
    pub const STANDARDIZE: u64 = 5;
    pub const DATA: u64 = 6;
    pub const DDLIS: u64 = 7;
    pub const DIAGNOSTICS: u64 = 8;
    pub const NMC: u64 = 9;
    pub const GAUSS: u64 = 10;
    pub const RANDOM_DESIGNS: u64 = 11;
    pub const TRUTH: u64 = 12;
    pub const LAYER: u64 = 13;
    pub const RESTART: u64 = 14;
    pub const CONDITIONAL: u64 = 15;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a list of tags into a new 64-bit seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn substream(seed: u64, tags: &[u64]) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

pub fn standard_normal_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Randomly shifted Halton points in `[0,1)^dim`.
///
/// Used where a test needs low-variance reference integrals; each point is
/// still marginally uniform because of the random shift.
pub fn shifted_halton(dim: usize, n: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    use rand::Rng;
    const PRIMES: [u64; 24] = [
        2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    ];
    assert!(dim <= PRIMES.len(), "shifted_halton supports up to 24 dimensions");
    let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
    (0..n)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let b = PRIMES[d];
                    let mut f = 1.0;
                    let mut r = 0.0;
                    let mut k = (i + 1) as u64;
                    while k > 0 {
                        f /= b as f64;
                        r += f * (k % b) as f64;
                        k /= b;
                    }
                    (r + shift[d]).fract()
                })
                .collect()
        })
        .collect()
}
