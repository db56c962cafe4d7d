use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::tensor::{Scalar, Tensor};

/// Name of the generator recorded in run manifests.
pub const RNG_ALGORITHM: &str = "xoshiro256++ (splitmix64 seeding), ziggurat normals";

/// Seeded generator. Streams are addressed by `(seed, stream_id)` so that
/// parallel or reordered work never shares state.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream_id: u64) -> Self {
        let key = splitmix64(seed) ^ splitmix64(stream_id.wrapping_add(0xD1B5_4A32_D192_ED03));
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(key),
        }
    }

    /// Child stream derived from this generator's next output.
    pub fn fork(&mut self, stream_id: u64) -> Self {
        let base = self.inner.gen::<u64>();
        Self::stream(base, stream_id)
    }

    /// Uniform in `[0, 1)`, 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn gamma(&mut self, shape: f64, scale: f64) -> f64 {
        rand_distr::Gamma::new(shape, scale)
            .expect("gamma parameters must be positive")
            .sample(&mut self.inner)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// I.i.d. standard-normal tensor.
pub fn gaussian<S: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(rng.normal()))
}
