//! Seedable, splittable noise source.
//!
//! Every stochastic draw in the crate (initialization, token dropout,
//! reparameterized sampling, prior sampling, shuffling) goes through a
//! [`NoiseRng`]. The generator is ChaCha8 in counter mode: a `(seed, stream)`
//! pair fully determines the output, and [`NoiseRng::fork`] derives an
//! independent child stream from a label without advancing the parent.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Result;

#[derive(Debug, Clone)]
pub struct NoiseRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator keyed by `label`. Forking the same parent with the same
    /// label always yields the same child, regardless of how many values the
    /// parent has produced.
    pub fn fork(&self, label: u64) -> Self {
        let stream = splitmix64(self.stream ^ splitmix64(label.wrapping_add(1)));
        Self::with_stream(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Standard-normal tensor of the given shape.
    pub fn normal_tensor(&mut self, shape: &[usize], dtype: DType) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = self.normal_vec(n);
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Mutable access for APIs that take an `Rng` (shuffles, choices).
    pub fn as_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}
