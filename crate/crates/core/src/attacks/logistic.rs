//! Deterministic logistic regression on standardized features, shared by
//! the trainable membership classifiers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ITERATIONS: usize = 500;
const LEARNING_RATE: f64 = 1.0;
const STD_FLOOR: f64 = 1e-8;

/// A linear classifier over z-scored features. Standardization constants
/// are stored so scoring applies the same transform as training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Fit by full-batch gradient descent on the logistic loss. The training
/// procedure is deterministic: features are standardized column-wise
/// (spread floored at 1e-8), weights start at zero, and updates follow a
/// fixed iteration count, so the result is a pure function of the rows.
pub fn fit_logistic(features: &[Vec<f64>], labels: &[bool]) -> Result<Logistic> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidConfig(
            "classifier training needs one label per feature row".into(),
        ));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidConfig(
            "classifier feature rows must share a positive width".into(),
        ));
    }
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(Error::SingleClass);
    }

    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for row in features {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / n;
        }
    }
    let mut std = vec![0.0; dim];
    for row in features {
        for ((s, m), x) in std.iter_mut().zip(&mean).zip(row) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(STD_FLOOR);
    }

    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((x, m), s)| (x - m) / s)
                .collect()
        })
        .collect();

    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    for _ in 0..ITERATIONS {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for (row, &y) in z.iter().zip(labels) {
            let margin: f64 = row.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>() + bias;
            let err = sigmoid(margin) - if y { 1.0 } else { 0.0 };
            for (g, x) in gw.iter_mut().zip(row) {
                *g += err * x;
            }
            gb += err;
        }
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= LEARNING_RATE * g / n;
        }
        bias -= LEARNING_RATE * gb / n;
    }
    Ok(Logistic { mean, std, weights, bias })
}

impl Logistic {
    /// Membership probability of a raw (unstandardized) feature vector.
    pub fn probability(&self, features: &[f64]) -> f64 {
        assert_eq!(features.len(), self.weights.len(), "feature width mismatch");
        let margin: f64 = features
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .zip(&self.weights)
            .map(|(((x, m), s), w)| (x - m) / s * w)
            .sum::<f64>()
            + self.bias;
        sigmoid(margin)
    }

    /// Hard label at the 0.5 probability boundary.
    pub fn predict(&self, features: &[f64]) -> bool {
        self.probability(features) > 0.5
    }
}
