//! Bootstrap ensemble of closed-form ridge regressors.
//!
//! Resampling happens at the subject level so all visits of a drawn subject
//! stay together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dim, InputScaler, Prediction, Predictor, TrainingSet};
use crate::data::Dataset;
use crate::error::PredictError;
use crate::linalg::Cholesky;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub members: usize,
    pub ridge_lambda: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            members: 20,
            ridge_lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapModel {
    pub scaler: InputScaler,
    /// Per member: one weight per scaled input column, intercept last.
    pub members: Vec<Vec<f64>>,
}

/// Ridge regression on `[z; 1]` with the intercept unpenalised.
pub fn ridge_fit(rows: &[Vec<f64>], targets: &[f64], lambda: f64) -> Result<Vec<f64>, PredictError> {
    let p = rows.first().map_or(0, Vec::len) + 1;
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    let mut aug = vec![0.0; p];
    for (z, &y) in rows.iter().zip(targets) {
        aug[..p - 1].copy_from_slice(z);
        aug[p - 1] = 1.0;
        for i in 0..p {
            b[i] += aug[i] * y;
            for j in 0..=i {
                a[i * p + j] += aug[i] * aug[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            a[j * p + i] = a[i * p + j];
        }
        if i + 1 < p {
            a[i * p + i] += lambda;
        }
    }
    let chol = Cholesky::factor(&a, p, 0.0).ok_or(PredictError::SingularRidge)?;
    // rank deficiency can survive factorisation as a rounding-sized pivot
    let scale = (0..p).map(|i| a[i * p + i]).fold(0.0, f64::max);
    if (0..p).any(|i| chol.lower[i * p + i].powi(2) <= 1e-12 * scale) {
        return Err(PredictError::SingularRidge);
    }
    Ok(chol.solve(&b))
}

fn affine(w: &[f64], z: &[f64]) -> f64 {
    let (slope, intercept) = w.split_at(z.len());
    slope.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + intercept[0]
}

pub fn fit_bootstrap(train: &Dataset, cfg: &BootstrapConfig, seed: u64) -> Result<BootstrapModel, PredictError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fit_bootstrap_with(train, cfg, |n| (0..n).map(|_| rng.random_range(0..n)).collect())
}

/// Like [`fit_bootstrap`] with a caller-supplied resampler that maps the
/// number of training subjects to the drawn subject indices.
pub fn fit_bootstrap_with<F>(train: &Dataset, cfg: &BootstrapConfig, mut resample: F) -> Result<BootstrapModel, PredictError>
where
    F: FnMut(usize) -> Vec<usize>,
{
    if cfg.members < 2 {
        return Err(PredictError::Config {
            op: "fit_bootstrap",
            msg: format!("ensemble needs at least 2 members, got {}", cfg.members),
        });
    }
    if !(cfg.ridge_lambda >= 0.0) {
        return Err(PredictError::Config {
            op: "fit_bootstrap",
            msg: format!("ridge penalty must be non-negative, got {}", cfg.ridge_lambda),
        });
    }
    if train.len() < 2 {
        return Err(PredictError::Config {
            op: "fit_bootstrap",
            msg: format!("need at least 2 training subjects, got {}", train.len()),
        });
    }
    let set = TrainingSet::from_dataset(train);
    if set.is_empty() {
        return Err(PredictError::EmptyTraining { op: "fit_bootstrap" });
    }
    let scaler = InputScaler::fit(&set.rows);
    let scaled: Vec<Vec<f64>> = set.rows.iter().map(|r| scaler.transform_row(r)).collect();

    let mut rows_of_subject: Vec<Vec<usize>> = vec![Vec::new(); train.len()];
    for (row, &s) in set.subject_of_row.iter().enumerate() {
        rows_of_subject[s].push(row);
    }

    let mut members = Vec::with_capacity(cfg.members);
    for _ in 0..cfg.members {
        let drawn = resample(train.len());
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for s in drawn {
            for &r in &rows_of_subject[s] {
                rows.push(scaled[r].clone());
                y.push(set.targets[r]);
            }
        }
        members.push(ridge_fit(&rows, &y, cfg.ridge_lambda)?);
    }
    Ok(BootstrapModel { scaler, members })
}

impl BootstrapModel {
    /// Raw per-member predictions.
    pub fn member_predictions(&self, x: &[f64], t: u32) -> Result<Vec<f64>, PredictError> {
        check_dim(x.len(), self.input_dim())?;
        let z = self.scaler.transform(x, t);
        Ok(self.members.iter().map(|w| affine(w, &z)).collect())
    }

    /// Ensemble mean and sample standard deviation (denominator `B - 1`).
    pub fn summarize(values: &[f64]) -> Prediction {
        let b = values.len() as f64;
        let mean = values.iter().sum::<f64>() / b;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1.0);
        Prediction::floored(mean, var.sqrt())
    }
}

impl Predictor for BootstrapModel {
    fn input_dim(&self) -> usize {
        self.scaler.dim() - 1
    }

    fn predict(&self, x: &[f64], t: u32) -> Result<Prediction, PredictError> {
        Ok(Self::summarize(&self.member_predictions(x, t)?))
    }
}
