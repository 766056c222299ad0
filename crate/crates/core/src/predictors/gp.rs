//! Exact Gaussian-process regression with an RBF kernel.
//!
//! Hyperparameters are chosen by maximising the log marginal likelihood over
//! a finite grid anchored at the median pairwise input distance and the target
//! variance. Targets are centred on their training mean, so the GP itself has
//! a zero mean function.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dim, InputScaler, Prediction, Predictor, TrainingSet};
use crate::data::Dataset;
use crate::error::PredictError;
use crate::linalg::{dot, Cholesky};

const JITTER_MIN: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;
const MEDIAN_SAMPLE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_variance: f64,
    pub lengthscale: f64,
    pub noise_variance: f64,
}

/// Multipliers applied to the data-driven anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpGrid {
    pub lengthscale_factors: Vec<f64>,
    pub signal_factors: Vec<f64>,
    pub noise_factors: Vec<f64>,
}

impl Default for GpGrid {
    fn default() -> Self {
        Self {
            lengthscale_factors: vec![0.5, 1.0, 2.0, 4.0],
            signal_factors: vec![0.5, 1.0, 2.0],
            noise_factors: vec![0.01, 0.05, 0.1, 0.25],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub grid: GpGrid,
    /// Training rows beyond this are subsampled (seeded) before fitting.
    pub max_train_rows: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            grid: GpGrid::default(),
            max_train_rows: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub hyper: GpHyper,
    /// `None` when the covariance could not be factored.
    pub log_marginal_likelihood: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub scaler: InputScaler,
    /// Scaled training inputs, row-major `n x dim`.
    pub inputs: Vec<f64>,
    pub n: usize,
    pub dim: usize,
    pub target_mean: f64,
    pub hyper: GpHyper,
    /// Extra diagonal added on top of the noise variance to factor.
    pub jitter: f64,
    pub cholesky: Cholesky,
    /// `(K + s I)^-1 (y - mean)`.
    pub weights: Vec<f64>,
    pub log_marginal_likelihood: f64,
    pub grid_scores: Vec<GridScore>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf(sq: f64, hyper: &GpHyper) -> f64 {
    hyper.signal_variance * (-0.5 * sq / (hyper.lengthscale * hyper.lengthscale)).exp()
}

struct Prepared {
    scaler: InputScaler,
    inputs: Vec<f64>,
    n: usize,
    dim: usize,
    target_mean: f64,
    centred: Vec<f64>,
    sq: Vec<f64>,
}

impl Prepared {
    fn new(rows: &[Vec<f64>], targets: &[f64], scale_inputs: bool) -> Result<Self, PredictError> {
        if rows.is_empty() {
            return Err(PredictError::EmptyTraining { op: "fit_gp" });
        }
        let n = rows.len();
        let dim = rows[0].len();
        let scaler = if scale_inputs {
            InputScaler::fit(rows)
        } else {
            InputScaler::identity(dim)
        };
        let inputs: Vec<f64> = rows.iter().flat_map(|r| scaler.transform_row(r)).collect();
        let target_mean = targets.iter().sum::<f64>() / n as f64;
        let centred = targets.iter().map(|y| y - target_mean).collect();
        let mut sq = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let d = sq_dist(&inputs[i * dim..(i + 1) * dim], &inputs[j * dim..(j + 1) * dim]);
                sq[i * n + j] = d;
                sq[j * n + i] = d;
            }
        }
        Ok(Self {
            scaler,
            inputs,
            n,
            dim,
            target_mean,
            centred,
            sq,
        })
    }

    fn median_distance(&self) -> f64 {
        let stride = (self.n / MEDIAN_SAMPLE).max(1);
        let idx: Vec<usize> = (0..self.n).step_by(stride).collect();
        let mut d = Vec::with_capacity(idx.len() * idx.len() / 2);
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[..a] {
                d.push(self.sq[i * self.n + j].sqrt());
            }
        }
        if d.is_empty() {
            return 1.0;
        }
        d.sort_by(f64::total_cmp);
        let m = d[d.len() / 2];
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }

    fn target_variance(&self) -> f64 {
        let v = self.centred.iter().map(|y| y * y).sum::<f64>() / self.n as f64;
        if v > 1e-12 {
            v
        } else {
            1.0
        }
    }

    fn factor(&self, hyper: &GpHyper) -> Result<(Cholesky, f64, Vec<f64>, f64), f64> {
        let k: Vec<f64> = self.sq.iter().map(|&s| rbf(s, hyper)).collect();
        let (chol, jitter) =
            Cholesky::factor_with_jitter(&k, self.n, hyper.noise_variance, JITTER_MIN, JITTER_MAX)?;
        let weights = chol.solve(&self.centred);
        let lml = -0.5 * dot(&self.centred, &weights)
            - 0.5 * chol.log_det()
            - 0.5 * self.n as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok((chol, jitter, weights, lml))
    }

    fn into_model(
        self,
        hyper: GpHyper,
        fitted: (Cholesky, f64, Vec<f64>, f64),
        grid_scores: Vec<GridScore>,
    ) -> GpModel {
        let (cholesky, jitter, weights, lml) = fitted;
        GpModel {
            scaler: self.scaler,
            inputs: self.inputs,
            n: self.n,
            dim: self.dim,
            target_mean: self.target_mean,
            hyper,
            jitter,
            cholesky,
            weights,
            log_marginal_likelihood: lml,
            grid_scores,
        }
    }
}

/// Fits an exact GP on every (subject, visit) row of `train`.
pub fn fit_gp(train: &Dataset, cfg: &GpConfig, seed: u64) -> Result<GpModel, PredictError> {
    let set = TrainingSet::from_dataset(train);
    if set.is_empty() {
        return Err(PredictError::EmptyTraining { op: "fit_gp" });
    }
    let (rows, targets) = if cfg.max_train_rows > 0 && set.len() > cfg.max_train_rows {
        let mut idx: Vec<usize> = (0..set.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x6770_5f73_7562));
        idx.truncate(cfg.max_train_rows);
        idx.sort_unstable();
        log::info!(
            "fit_gp: subsampling {} of {} training rows",
            cfg.max_train_rows,
            set.len()
        );
        (
            idx.iter().map(|&i| set.rows[i].clone()).collect::<Vec<_>>(),
            idx.iter().map(|&i| set.targets[i]).collect::<Vec<_>>(),
        )
    } else {
        (set.rows, set.targets)
    };
    GpModel::fit_rows(&rows, &targets, &cfg.grid)
}

impl GpModel {
    /// Grid search over hyperparameters on raw `[x; t]` rows.
    pub fn fit_rows(rows: &[Vec<f64>], targets: &[f64], grid: &GpGrid) -> Result<Self, PredictError> {
        let prep = Prepared::new(rows, targets, true)?;
        let ell0 = prep.median_distance();
        let var0 = prep.target_variance();

        let mut scores = Vec::new();
        let mut best: Option<(GpHyper, (Cholesky, f64, Vec<f64>, f64))> = None;
        let mut worst_jitter = JITTER_MIN;
        for &lf in &grid.lengthscale_factors {
            for &sf in &grid.signal_factors {
                for &nf in &grid.noise_factors {
                    let hyper = GpHyper {
                        signal_variance: sf * var0,
                        lengthscale: lf * ell0,
                        noise_variance: nf * var0,
                    };
                    match prep.factor(&hyper) {
                        Ok(fit) => {
                            scores.push(GridScore {
                                hyper,
                                log_marginal_likelihood: Some(fit.3),
                            });
                            if best.as_ref().is_none_or(|(_, b)| fit.3 > b.3) {
                                best = Some((hyper, fit));
                            }
                        }
                        Err(j) => {
                            worst_jitter = j;
                            scores.push(GridScore {
                                hyper,
                                log_marginal_likelihood: None,
                            });
                        }
                    }
                }
            }
        }
        let (hyper, fit) = best.ok_or(PredictError::Cholesky { jitter: worst_jitter })?;
        log::debug!("fit_gp: selected {hyper:?}, lml {:.4}", fit.3);
        Ok(prep.into_model(hyper, fit, scores))
    }

    /// Exact GP with fixed hyperparameters. With `scale_inputs == false` the
    /// rows are used as given.
    pub fn with_hyper(
        rows: &[Vec<f64>],
        targets: &[f64],
        hyper: GpHyper,
        scale_inputs: bool,
    ) -> Result<Self, PredictError> {
        let prep = Prepared::new(rows, targets, scale_inputs)?;
        let fit = prep
            .factor(&hyper)
            .map_err(|jitter| PredictError::Cholesky { jitter })?;
        let score = GridScore {
            hyper,
            log_marginal_likelihood: Some(fit.3),
        };
        Ok(prep.into_model(hyper, fit, vec![score]))
    }

    /// Posterior at a raw `[x; t]` row.
    pub fn predict_row(&self, row: &[f64]) -> Result<Prediction, PredictError> {
        check_dim(row.len(), self.dim)?;
        let z = self.scaler.transform_row(row);
        let kstar: Vec<f64> = (0..self.n)
            .map(|i| rbf(sq_dist(&z, &self.inputs[i * self.dim..(i + 1) * self.dim]), &self.hyper))
            .collect();
        let mean = self.target_mean + dot(&kstar, &self.weights);
        let v = self.cholesky.solve_lower(&kstar);
        let var = (self.hyper.signal_variance - dot(&v, &v)).max(0.0) + self.hyper.noise_variance;
        Ok(Prediction::floored(mean, var.sqrt()))
    }
}

impl Predictor for GpModel {
    fn input_dim(&self) -> usize {
        self.dim - 1
    }

    fn predict(&self, x: &[f64], t: u32) -> Result<Prediction, PredictError> {
        check_dim(x.len(), self.input_dim())?;
        let mut row = x.to_vec();
        row.push(t as f64);
        self.predict_row(&row)
    }
}
