//! Deterministic random streams.
//!
//! The generator is ChaCha8 (a counter-based stream cipher) from
//! `rand_chacha`. Its output depends only on the 64-bit seed and the 64-bit
//! stream selector, so results are identical across runs, platforms and
//! thread schedules. Independent substreams are derived from a base seed by
//! selecting a ChaCha stream id; [`stream_id`] mixes a small domain tag and
//! up to two indices (for example worker and episode) into that id with the
//! SplitMix64 finalizer.
//!
//! Standard normals come from `rand_distr::StandardNormal` (ziggurat).

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Vector;

/// Stream domains. Keeping them distinct guarantees that, say, the noise
/// stream of env 3 never aliases the initial-condition stream of group 3.
pub mod domain {
    pub const INIT: u8 = 1;
    pub const OBS_NOISE: u8 = 2;
    pub const POLICY: u8 = 3;
    pub const PARAMS: u8 = 4;
    pub const WORKLOAD: u8 = 5;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha stream id for `(domain, a, b)`.
pub fn stream_id(domain: u8, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(domain as u64) ^ a) ^ b.rotate_left(17))
}

/// Single-owner deterministic generator.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `idx` of `seed`. Stream 0 is the same sequence as `Rng::new(seed)`.
    pub fn substream(seed: u64, idx: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(idx);
        Self { inner }
    }

    /// Substream keyed by a domain tag and two indices.
    pub fn keyed(seed: u64, domain: u8, a: u64, b: u64) -> Self {
        Self::substream(seed, stream_id(domain, a, b))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// `n` standard normal draws.
    pub fn gaussian<S: Scalar>(&mut self, n: usize) -> Vector<S> {
        Vector::from_vec((0..n).map(|_| S::lit(self.standard_normal())).collect())
    }
}

/// Free-function form of [`Rng::new`].
pub fn rng_new(seed: u64) -> Rng {
    Rng::new(seed)
}

/// Free-function form of [`Rng::gaussian`].
pub fn gaussian<S: Scalar>(rng: &mut Rng, n: usize) -> Vector<S> {
    rng.gaussian(n)
}
