//! Seeded synthetic datasets for testing the pipeline without real scans.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use super::data::{DataError, LabeledDataset};
use crate::convnet::Image;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("informative count {informative} exceeds dimension {dim}")]
    TooManyInformative { informative: usize, dim: usize },
    #[error("need at least two classes")]
    TooFewClasses,
    #[error("image mode supports at most {max} pattern classes")]
    TooManyPatterns { max: usize },
    #[error("{0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Gaussian features where only the first `informative` columns depend on the
/// class.
///
/// Class 0 has mean 0 everywhere. Class `k >= 1` has mean `separation` on
/// every informative column `j` with `j % (K - 1) == k - 1`. Informative
/// columns get `noise * N(0, 1)` on top of the class mean; the remaining
/// columns are pure `N(0, 1)`. With `K = informative + 1` each informative
/// column is the only one that separates its class from class 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSynth {
    pub samples: usize,
    pub dim: usize,
    pub informative: usize,
    pub classes: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for FeatureSynth {
    fn default() -> Self {
        Self {
            samples: 200,
            dim: 20,
            informative: 5,
            classes: 3,
            separation: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl FeatureSynth {
    /// Class mean of column `j`.
    pub fn mean(&self, class: usize, j: usize) -> f64 {
        if class == 0 || j >= self.informative {
            0.0
        } else if j % (self.classes - 1) == class - 1 {
            self.separation
        } else {
            0.0
        }
    }

    pub fn generate(&self) -> Result<LabeledDataset, SynthError> {
        if self.informative > self.dim {
            return Err(SynthError::TooManyInformative {
                informative: self.informative,
                dim: self.dim,
            });
        }
        if self.classes < 2 {
            return Err(SynthError::TooFewClasses);
        }
        if self.samples == 0 || self.dim == 0 {
            return Err(SynthError::Invalid("samples and dim must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.separation.is_finite()) {
            return Err(SynthError::Invalid("noise must be finite and nonnegative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let labels: Vec<usize> = (0..self.samples).map(|i| i % self.classes).collect();
        let mut x = Array2::zeros((self.samples, self.dim));
        for (i, &label) in labels.iter().enumerate() {
            for j in 0..self.dim {
                let z: f64 = rng.sample(StandardNormal);
                x[[i, j]] = if j < self.informative {
                    self.mean(label, j) + self.noise * z
                } else {
                    z
                };
            }
        }
        Ok(LabeledDataset::from_features(
            x,
            labels,
            (0..self.classes).map(|k| format!("class{k}")).collect(),
        )?)
    }
}

/// Grayscale images of class-specific shapes on a dim background.
///
/// Shapes by class: horizontal bar, vertical bar, diagonal, cross, square
/// outline, filled disc. Each image places its shape at a random offset and
/// adds Gaussian pixel noise before clamping to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSynth {
    pub samples: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for ImageSynth {
    fn default() -> Self {
        Self {
            samples: 300,
            height: 28,
            width: 28,
            classes: 3,
            noise: 0.1,
            seed: 0,
        }
    }
}

pub const PATTERNS: usize = 6;

fn on_pattern(class: usize, i: f64, j: f64, size: f64) -> bool {
    let r = size / 2.0;
    match class {
        0 => i.abs() <= 1.5 && j.abs() <= r,
        1 => j.abs() <= 1.5 && i.abs() <= r,
        2 => (i - j).abs() <= 1.5 && i.abs() <= r,
        3 => (i.abs() <= 1.0 || j.abs() <= 1.0) && i.abs() <= r && j.abs() <= r,
        4 => {
            let m = i.abs().max(j.abs());
            m <= r && m >= r - 1.5
        }
        _ => i * i + j * j <= r * r,
    }
}

impl ImageSynth {
    pub fn generate(&self) -> Result<LabeledDataset, SynthError> {
        if self.classes < 2 {
            return Err(SynthError::TooFewClasses);
        }
        if self.classes > PATTERNS {
            return Err(SynthError::TooManyPatterns { max: PATTERNS });
        }
        if self.height < 8 || self.width < 8 || self.samples == 0 {
            return Err(SynthError::Invalid(
                "images must be at least 8x8 and samples positive",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(SynthError::Invalid("noise must be finite and nonnegative"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (h, w) = (self.height, self.width);
        let size = (h.min(w) as f64 * 0.6).floor();
        let shift = (h.min(w) as f64 * 0.12).floor() as i64;
        let labels: Vec<usize> = (0..self.samples).map(|i| i % self.classes).collect();
        let mut images = Vec::with_capacity(self.samples);
        for &label in &labels {
            let ci = (h as f64 - 1.0) / 2.0 + rng.random_range(-shift..=shift) as f64;
            let cj = (w as f64 - 1.0) / 2.0 + rng.random_range(-shift..=shift) as f64;
            let mut data = Vec::with_capacity(h * w);
            for i in 0..h {
                for j in 0..w {
                    let base = if on_pattern(label, i as f64 - ci, j as f64 - cj, size) {
                        0.8
                    } else {
                        0.1
                    };
                    let z: f64 = rng.sample(StandardNormal);
                    data.push((base + self.noise * z).clamp(0.0, 1.0));
                }
            }
            images.push(Image::new(h, w, 1, data).expect("values clamped to [0, 1]"));
        }
        Ok(LabeledDataset::from_images(
            images,
            labels,
            (0..self.classes).map(|k| format!("pattern{k}")).collect(),
        )?)
    }
}
