//! Seeded random streams.
//!
//! `RngStream` wraps a ChaCha8 generator keyed by a 64-bit seed. Gaussian
//! draws use the ziggurat sampler from `rand_distr` (`StandardNormal`), then
//! an affine map to the requested mean and standard deviation. The stream is
//! reproducible within this implementation only.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `(seed, stream)`; used to give each
    /// epoch, step or trial its own generator without consuming this one.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngStream { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// I.i.d. Gaussian draws of the given shape.
pub fn sample_gaussian(shape: &[usize], mean: f64, std: f64, rng: &mut RngStream) -> Result<Tensor> {
    if !std.is_finite() || std < 0.0 {
        return Err(Error::invalid(format!("std must be finite and >= 0, got {std}")));
    }
    if !mean.is_finite() {
        return Err(Error::invalid(format!("mean must be finite, got {mean}")));
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::invalid(format!("shape must be nonempty with positive dims, got {shape:?}")));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| mean + std * rng.gaussian()).collect();
    Tensor::from_vec(shape, data)
}
