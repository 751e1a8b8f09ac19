//! Seeded random streams.
//!
//! Every draw comes from a ChaCha8 generator keyed by `(seed, index)` with
//! the ChaCha stream id selecting what the numbers are for, so task
//! parameters, datasets, initializations and evaluation tasks never share
//! randomness even when they use the same seed and index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Task = 1,
    Data = 2,
    Init = 3,
    Eval = 4,
    Perturb = 5,
    Query = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a base seed with a sub-index.
pub fn mix(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.rotate_left(17) ^ 0x5851_f42d_4c95_7f2d)
}

pub fn stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index));
    rng.set_stream(which as u64);
    rng
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * normal(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct() {
        let a = normal(&mut stream(1, Stream::Task, 0));
        let b = normal(&mut stream(1, Stream::Data, 0));
        let c = normal(&mut stream(1, Stream::Task, 1));
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, normal(&mut stream(1, Stream::Task, 0)));
    }
}
