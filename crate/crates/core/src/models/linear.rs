//! Behavior-only linear baselines: L2-regularized logistic regression and
//! linear SVM, both trained with mini-batch gradient descent.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::features::{FEATURE_NAMES, N_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    LogisticRegression,
    LinearSvm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearFitConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for LinearFitConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            epochs: 30,
            lr: 0.1,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub kind: LinearKind,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LinearModel {
    pub fn zeros(kind: LinearKind, dim: usize, l2: f64) -> Self {
        Self {
            kind,
            weights: vec![0.0; dim],
            bias: 0.0,
            l2,
        }
    }

    pub fn score(&self, x: &[f64]) -> Result<f64, ModelError> {
        if x.len() != self.weights.len() {
            return Err(ModelError::FeatureLength {
                got: x.len(),
                expected: self.weights.len(),
            });
        }
        Ok(dot(&self.weights, x) + self.bias)
    }

    /// Label 1 iff the score is strictly positive; a zero score is class 0.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, f64), ModelError> {
        let s = self.score(x)?;
        Ok((usize::from(s > 0.0), s))
    }

    /// Logistic probability of class 1.
    pub fn probability(&self, x: &[f64]) -> Result<f64, ModelError> {
        Ok(sigmoid(self.score(x)?))
    }

    /// Regularized training objective (mean loss + l2·‖w‖²).
    pub fn objective(&self, x: &[Vec<f64>], y: &[usize]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let s = self.score(xi)?;
            total += match self.kind {
                LinearKind::LogisticRegression => {
                    // log(1 + e^{-s}) for y=1, log(1 + e^{s}) for y=0, computed stably
                    let z = if yi == 1 { -s } else { s };
                    z.max(0.0) + (-z.abs()).exp().ln_1p()
                }
                LinearKind::LinearSvm => {
                    let t = if yi == 1 { 1.0 } else { -1.0 };
                    (1.0 - t * s).max(0.0)
                }
            };
        }
        Ok(total / x.len() as f64 + self.l2 * dot(&self.weights, &self.weights))
    }

    /// One shuffled pass of mini-batch (sub)gradient descent.
    pub fn fit_epoch(
        &mut self,
        x: &[Vec<f64>],
        y: &[usize],
        cfg: &LinearFitConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), ModelError> {
        let mut order: Vec<usize> = (0..x.len()).collect();
        order.shuffle(rng);
        let dim = self.weights.len();
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for &i in batch {
                let s = self.score(&x[i])?;
                let coef = match self.kind {
                    LinearKind::LogisticRegression => sigmoid(s) - y[i] as f64,
                    LinearKind::LinearSvm => {
                        let t = if y[i] == 1 { 1.0 } else { -1.0 };
                        if t * s < 1.0 {
                            -t
                        } else {
                            0.0
                        }
                    }
                };
                if coef != 0.0 {
                    for (g, v) in gw.iter_mut().zip(&x[i]) {
                        *g += coef * v;
                    }
                    gb += coef;
                }
            }
            let n = batch.len() as f64;
            for (w, g) in self.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * (g / n + 2.0 * self.l2 * *w);
            }
            self.bias -= cfg.lr * gb / n;
        }
        if self.weights.iter().any(|w| !w.is_finite()) || !self.bias.is_finite() {
            return Err(ModelError::Diverged);
        }
        Ok(())
    }

    pub fn feature_name(&self, i: usize) -> String {
        if self.weights.len() == N_FEATURES {
            FEATURE_NAMES[i].to_owned()
        } else {
            format!("f{}", i + 1)
        }
    }
}

/// Trains from zero weights for `cfg.epochs` passes, shuffling with `seed`.
pub fn linear_fit(
    x: &[Vec<f64>],
    y: &[usize],
    kind: LinearKind,
    cfg: &LinearFitConfig,
    seed: u64,
) -> Result<LinearModel, ModelError> {
    if x.is_empty() {
        return Err(ModelError::EmptyData);
    }
    if x.len() != y.len() {
        return Err(ModelError::LabelCount {
            rows: x.len(),
            labels: y.len(),
        });
    }
    let mut model = LinearModel::zeros(kind, x[0].len(), cfg.l2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.epochs {
        model.fit_epoch(x, y, cfg, &mut rng)?;
    }
    Ok(model)
}

/// The `k` largest coefficients by magnitude, signed, largest first.
/// Ties keep feature order. `k` beyond the weight count is clamped.
pub fn coefficient_report(model: &LinearModel, k: usize) -> Vec<(String, f64)> {
    let dim = model.weights.len();
    if k > dim {
        log::warn!("requested top-{k} coefficients but the model has {dim}; clamping");
    }
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        model.weights[b]
            .abs()
            .partial_cmp(&model.weights[a].abs())
            .expect("finite weights")
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(k.min(dim))
        .map(|i| (model.feature_name(i), model.weights[i]))
        .collect()
}
