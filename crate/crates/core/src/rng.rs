//! Seeded random number generation.
//!
//! All randomness flows through [`SeededRng`], a ChaCha8 stream cipher keyed
//! by a 64-bit seed with an explicit stream id per purpose. ChaCha8 is
//! counter-based, so output is identical on every platform. Uniform reals use
//! the top 53 bits of a `u64`; normals use the Box-Muller transform (both
//! outputs are consumed in order). Neither transform depends on a third-party
//! distribution implementation, so bit-exact reproduction does not hinge on
//! crate versions.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Independent generator streams. Two purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Attack = 4,
    Corruption = 5,
    Sim = 6,
    Universal = 7,
    Test = 99,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
}

#[derive(Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream as u64);
        Self { inner, spare_normal: None }
    }

    /// Generator for a sub-task (sample index, restart, episode) of a seeded job.
    pub fn derived(seed: u64, stream: Stream, index: u64) -> Self {
        Self::new(mix_seed(seed, index), stream)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's widening multiply; the bias is below 2^-64 * n.
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - unit() lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.unit();
        let u2 = self.unit();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    pub fn sample(&mut self, dist: Distribution) -> f64 {
        match dist {
            Distribution::Uniform { lo, hi } => self.uniform(lo, hi),
            Distribution::Normal { mean, std } => self.normal(mean, std),
        }
    }

    /// Knuth's multiplication method; adequate for the small rates used here.
    pub fn poisson(&mut self, rate: f64) -> u64 {
        if rate <= 0.0 {
            return 0;
        }
        let limit = (-rate).exp();
        let mut k = 0u64;
        let mut p = self.unit();
        while p > limit {
            k += 1;
            p *= self.unit();
        }
        k
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer over `seed ^ f(index)`.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic tensor of i.i.d. draws from `dist`.
pub fn seeded_random(seed: u64, shape: &[usize], dist: Distribution) -> crate::Result<Tensor> {
    match dist {
        Distribution::Uniform { lo, hi } if !(lo < hi) => {
            return Err(crate::Error::contract(format!("uniform bounds must satisfy a < b, got ({lo}, {hi})")));
        }
        Distribution::Normal { std, .. } if !(std > 0.0) => {
            return Err(crate::Error::contract(format!("normal std must be positive, got {std}")));
        }
        _ => {}
    }
    let mut rng = SeededRng::new(seed, Stream::Init);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(dist)).collect();
    Tensor::new(shape.to_vec(), data)
}
