use serde::{Deserialize, Serialize};

use super::WindowedFeatures;
use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-8;

/// Per-feature (per frequency bin) z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Fits on the training split only; pools every window and channel.
    pub fn fit(train: &[WindowedFeatures]) -> Result<Self> {
        let dim = train
            .first()
            .ok_or_else(|| Error::data("cannot fit normalization on an empty split"))?
            .dim;
        if train.iter().any(|f| f.dim != dim) {
            return Err(Error::data("feature widths differ across clips"));
        }
        let mut count = 0usize;
        let mut mean = vec![0.0; dim];
        for f in train {
            for row in f.values.chunks_exact(dim) {
                mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
                count += 1;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; dim];
        for f in train {
            for row in f.values.chunks_exact(dim) {
                for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                    *v += (x - m) * (x - m);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, features: &mut WindowedFeatures) -> Result<()> {
        if features.dim != self.mean.len() {
            return Err(Error::data(format!(
                "normalization fitted on {} features, got {}",
                self.mean.len(),
                features.dim
            )));
        }
        for row in features.values.chunks_exact_mut(features.dim) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *x = (*x - m) / s;
            }
        }
        Ok(())
    }

    pub fn apply_all(&self, features: &mut [WindowedFeatures]) -> Result<()> {
        features.iter_mut().try_for_each(|f| self.apply(f))
    }
}
