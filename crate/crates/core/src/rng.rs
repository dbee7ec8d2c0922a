//! Seeded random streams.
//!
//! Every consumer derives its own generator from the run seed plus a fixed
//! list of stream coordinates (purpose, phase, epoch, ...), so results do not
//! depend on the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ndtensor::Tensor;
use crate::scalar::Scalar;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const EPS: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const GLYPH: u64 = 5;
    pub const OBJECTS: u64 = 6;
    pub const PREDICT: u64 = 7;
    pub const EVAL: u64 = 8;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(splitmix(seed), |acc, &c| splitmix(acc ^ splitmix(c)))
}

pub fn stream_rng(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, coords))
}

pub fn normal_tensor<T: Scalar, R: rand::Rng>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        T::of(v)
    })
}
