//! Fixed random-projection image features.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 32;
pub const FEATURE_SEED: u64 = 0x00C0_FFEE;

/// Linear map from flattened pixels to `output_dim` features, with entries
/// drawn once from `N(0, 1/input_dim)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureProjection {
    pub input_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
    /// Row-major `[input_dim, output_dim]`.
    pub weights: Vec<f32>,
}

impl FeatureProjection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument("feature projection dims must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (input_dim as f32).sqrt();
        let weights = (0..input_dim * output_dim).map(|_| rng.sample::<f32, _>(StandardNormal) * std).collect();
        Ok(Self { input_dim, output_dim, seed, weights })
    }

    /// The standard 32-feature projection for images with `pixels` values.
    pub fn standard(pixels: usize) -> Result<Self> {
        Self::new(pixels, FEATURE_DIM, FEATURE_SEED)
    }

    /// `[N, ...]` images to `[N, output_dim]` features, accumulated in `f64`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.shape()[0];
        let per = images.numel() / n;
        if per != self.input_dim {
            return Err(Error::shape(
                "features",
                format!("images have {per} values each, projection expects {}", self.input_dim),
            ));
        }
        let d = self.output_dim;
        let mut out = vec![0.0f32; n * d];
        let mut acc = vec![0.0f64; d];
        for (img, row) in images.data().chunks_exact(per).zip(out.chunks_exact_mut(d)) {
            acc.fill(0.0);
            for (&px, w) in img.iter().zip(self.weights.chunks_exact(d)) {
                for (a, &wv) in acc.iter_mut().zip(w) {
                    *a += px as f64 * wv as f64;
                }
            }
            for (o, a) in row.iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        Tensor::new(vec![n, d], out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_slice(&bytes)?;
        if p.weights.len() != p.input_dim * p.output_dim {
            return Err(Error::Config(format!(
                "feature projection {}: {} weights for {}x{}",
                path.display(),
                p.weights.len(),
                p.input_dim,
                p.output_dim
            )));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_maps_to_zero() {
        let p = FeatureProjection::standard(16).unwrap();
        let f = p.features(&Tensor::zeros(vec![2, 1, 4, 4]).unwrap()).unwrap();
        assert_eq!(f.shape(), &[2, FEATURE_DIM]);
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(p.features(&Tensor::zeros(vec![1, 1, 3, 3]).unwrap()).is_err());
    }
}
