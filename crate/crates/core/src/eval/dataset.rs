//! Procedural toy images: Gaussian blobs, checkerboards, and blends of the two.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 7, count: 2000, image_size: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Blob,
    Checkerboard,
    Mixture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    config: DatasetConfig,
    images: Tensor,
    patterns: Vec<Pattern>,
}

fn blob(rng: &mut ChaCha8Rng, size: usize, out: &mut [f32]) {
    let s = size as f32;
    let (cx, cy) = (rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s));
    let width = rng.random_range(0.1 * s..0.25 * s);
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f32 + 0.5 - cx).powi(2) + (y as f32 + 0.5 - cy).powi(2);
            out[y * size + x] = 2.0 * (-d2 / (2.0 * width * width)).exp() - 1.0;
        }
    }
}

fn checkerboard(rng: &mut ChaCha8Rng, size: usize, out: &mut [f32]) {
    let cell = [2usize, 4, 8][rng.random_range(0..3)];
    let (px, py) = (rng.random_range(0..cell), rng.random_range(0..cell));
    for y in 0..size {
        for x in 0..size {
            let parity = ((x + px) / cell + (y + py) / cell) % 2;
            out[y * size + x] = if parity == 0 { 1.0 } else { -1.0 };
        }
    }
}

impl ToyDataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self> {
        if config.count == 0 || config.image_size < 2 {
            return Err(Error::Config(format!(
                "dataset needs count >= 1 and image_size >= 2, got {} and {}",
                config.count, config.image_size
            )));
        }
        let size = config.image_size;
        let per = size * size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut data = vec![0.0f32; config.count * per];
        let mut patterns = Vec::with_capacity(config.count);
        let mut scratch = vec![0.0f32; per];
        for img in data.chunks_exact_mut(per) {
            let pattern = [Pattern::Blob, Pattern::Checkerboard, Pattern::Mixture][rng.random_range(0..3)];
            match pattern {
                Pattern::Blob => blob(&mut rng, size, img),
                Pattern::Checkerboard => checkerboard(&mut rng, size, img),
                Pattern::Mixture => {
                    blob(&mut rng, size, img);
                    checkerboard(&mut rng, size, &mut scratch);
                    for (v, c) in img.iter_mut().zip(&scratch) {
                        *v = 0.5 * (*v + c);
                    }
                }
            }
            patterns.push(pattern);
        }
        Ok(Self { config: config.clone(), images: Tensor::new(vec![config.count, 1, size, size], data)?, patterns })
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    /// `[count, 1, size, size]`, values in `[-1, 1]`.
    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn len(&self) -> usize {
        self.config.count
    }

    pub fn is_empty(&self) -> bool {
        self.config.count == 0
    }
}
