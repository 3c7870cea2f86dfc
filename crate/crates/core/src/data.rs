//! Labelled image datasets and the synthetic oriented-grating generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Images `[n, c, h, w]` with integer labels in `0..class_count`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Seed of the generator that produced the data, if synthetic.
    pub generator_seed: Option<u64>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "images must be [n, c, h, w], got {:?}",
                images.shape()
            )));
        }
        if images.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Validation(format!("label {bad} outside 0..{class_count}")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            generator_seed: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(c, h, w)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Gathers the given samples into a batch tensor and label vector.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.image_dims();
        if indices.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor::from_parts_unchecked(vec![indices.len(), c, h, w], data), labels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parameters of the oriented-grating generator.
///
/// Class `k` of `K` is a sinusoidal grating at angle `pi * k / K` (plus a
/// uniform jitter of `+-angle_jitter` radians) with random spatial frequency,
/// phase and amplitude, plus i.i.d. gaussian pixel noise. Random phase makes
/// the mean image of every class nearly flat, so the classes are not linearly
/// separable in pixel space; orientation-selective filters are needed.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct GratingSpec {
    pub class_count: usize,
    pub n_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub angle_jitter: f64,
    pub seed: u64,
}

impl GratingSpec {
    pub const DEFAULT_NOISE: f64 = 0.6;
    pub const DEFAULT_ANGLE_JITTER: f64 = 0.25;

    pub fn new(class_count: usize, n_per_class: usize, height: usize, width: usize, seed: u64) -> Self {
        Self {
            class_count,
            n_per_class,
            height,
            width,
            noise: Self::DEFAULT_NOISE,
            angle_jitter: Self::DEFAULT_ANGLE_JITTER,
            seed,
        }
    }

    /// Samples are interleaved by class: sample `i` has label `i % class_count`.
    pub fn generate(&self) -> Result<Dataset> {
        if self.class_count < 2 {
            return Err(Error::config("data.class_count", "must be at least 2"));
        }
        if self.n_per_class == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config("data", "n_per_class, height and width must be positive"));
        }
        if !(self.noise >= 0.0) || !(self.angle_jitter >= 0.0) {
            return Err(Error::config("data.noise", "noise and angle_jitter must be non-negative"));
        }
        let (h, w) = (self.height, self.width);
        let n = self.class_count * self.n_per_class;
        let mut rng = Rng::new(self.seed);
        let mut data = Vec::with_capacity(n * h * w);
        let mut labels = Vec::with_capacity(n);
        let pi = core::f64::consts::PI;
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        for i in 0..n {
            let label = i % self.class_count;
            let angle = pi * label as f64 / self.class_count as f64
                + rng.uniform_range(-self.angle_jitter, self.angle_jitter);
            let freq = rng.uniform_range(0.9, 1.5);
            let phase = rng.uniform_range(0.0, 2.0 * pi);
            let amp = rng.uniform_range(0.6, 1.0);
            let (s, c) = (libm::sin(angle), libm::cos(angle));
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 - cx) * c + (y as f64 - cy) * s;
                    data.push(amp * libm::sin(freq * u + phase) + self.noise * rng.standard_normal());
                }
            }
            labels.push(label);
        }
        let images = Tensor::new(vec![n, 1, h, w], data)?;
        let mut ds = Dataset::new(images, labels, self.class_count)?;
        ds.generator_seed = Some(self.seed);
        Ok(ds)
    }
}

/// Balanced oriented-grating dataset with the default noise settings.
pub fn make_synthetic(class_count: usize, n_per_class: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    GratingSpec::new(class_count, n_per_class, height, width, seed).generate()
}
