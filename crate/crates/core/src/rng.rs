//! Seeded random numbers.
//!
//! The generator is ChaCha8 (a counter-based stream cipher generator) keyed
//! from a 64-bit seed via `SeedableRng::seed_from_u64`. Independent streams
//! for the same seed are selected with the ChaCha stream id. Gaussian samples
//! use the Box-Muller transform with `libm` transcendentals, so sample streams
//! are bit-identical across platforms.

use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::tensor::{check_shape, Tensor};
use crate::{Error, Result};

/// Stream ids used by the library. Per-epoch streams add the epoch index to
/// the base, so bases are spaced far apart.
pub mod streams {
    pub const INIT: u64 = 1 << 40;
    pub const NOISE: u64 = 2 << 40;
    pub const DATA: u64 = 3 << 40;
}

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            inner,
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        let n = n as u64;
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(r * libm::sin(theta));
        r * libm::cos(theta)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// Draws a tensor of independent `N(mean, stddev^2)` samples.
pub fn gaussian_sample(rng: &mut Rng, mean: f64, stddev: f64, shape: &[usize]) -> Result<Tensor> {
    if !(stddev >= 0.0) || !stddev.is_finite() || !mean.is_finite() {
        return Err(Error::Domain(alloc::format!(
            "gaussian parameters mean={mean} stddev={stddev}"
        )));
    }
    let n = check_shape(shape)?;
    let data = (0..n).map(|_| mean + stddev * rng.standard_normal()).collect();
    Ok(Tensor::from_parts_unchecked(shape.to_vec(), data))
}
