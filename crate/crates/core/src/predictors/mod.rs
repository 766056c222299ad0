//! Uncertainty-aware trajectory predictors.
//!
//! Every predictor maps a covariate vector `x` (features plus baseline
//! biomarker) and a query month `t` to a [`Prediction`]: a point estimate and
//! a predictive standard deviation. The three implementations differ only in
//! where the standard deviation comes from:
//!
//! - [`GpModel`]: exact Gaussian-process posterior variance,
//! - [`QuantileModel`]: spread between fitted lower/upper quantiles,
//! - [`BootstrapModel`]: sample deviation across a bootstrap ensemble.

mod bootstrap;
mod gp;
mod quantile;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::PredictError;

pub use bootstrap::{fit_bootstrap, fit_bootstrap_with, ridge_fit, BootstrapConfig, BootstrapModel};
pub use gp::{fit_gp, GpConfig, GpGrid, GpHyper, GpModel, GridScore};
pub use quantile::{
    fit_quantile, pinball_loss, z_for_levels, QuantileConfig, QuantileModel,
};

/// Lower bound applied to every predictive standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub std: f64,
}

impl Prediction {
    /// Builds a prediction with the standard-deviation floor applied.
    pub fn floored(mean: f64, std: f64) -> Self {
        let std = if std.is_nan() { SIGMA_FLOOR } else { std.max(SIGMA_FLOOR) };
        Self { mean, std }
    }
}

pub trait Predictor: Send + Sync {
    /// Length of the covariate vector `x` (time excluded).
    fn input_dim(&self) -> usize;

    fn predict(&self, x: &[f64], t: u32) -> Result<Prediction, PredictError>;

    fn predict_trajectory(&self, x: &[f64], times: &[u32]) -> Result<Vec<Prediction>, PredictError> {
        times.iter().map(|&t| self.predict(x, t)).collect()
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn predict(&self, x: &[f64], t: u32) -> Result<Prediction, PredictError> {
        (**self).predict(x, t)
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn predict(&self, x: &[f64], t: u32) -> Result<Prediction, PredictError> {
        (**self).predict(x, t)
    }
}

/// Element-wise prediction over `times`, order preserved.
pub fn predict_trajectory<P: Predictor + ?Sized>(
    model: &P,
    x: &[f64],
    times: &[u32],
) -> Result<Vec<Prediction>, PredictError> {
    model.predict_trajectory(x, times)
}

pub(crate) fn check_dim(got: usize, expected: usize) -> Result<(), PredictError> {
    if got == expected {
        Ok(())
    } else {
        Err(PredictError::Dimension { got, expected })
    }
}

/// Multiplies another predictor's standard deviation by a constant.
///
/// The floor is re-applied after scaling.
#[derive(Debug, Clone)]
pub struct ScaledStd<P> {
    pub inner: P,
    pub factor: f64,
}

impl<P: Predictor> Predictor for ScaledStd<P> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn predict(&self, x: &[f64], t: u32) -> Result<Prediction, PredictError> {
        let p = self.inner.predict(x, t)?;
        Ok(Prediction::floored(p.mean, p.std * self.factor))
    }
}

/// Column-wise z-scoring of the model input `[x; t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputScaler {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let p = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; p];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(p: usize) -> Self {
        Self {
            mean: vec![0.0; p],
            std: vec![1.0; p],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// Scales `[x; t]`.
    pub fn transform(&self, x: &[f64], t: u32) -> Vec<f64> {
        let mut row = Vec::with_capacity(x.len() + 1);
        row.extend_from_slice(x);
        row.push(t as f64);
        self.transform_row(&row)
    }
}

/// One `([x; t], y_t)` example per (subject, visit) pair.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub rows: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    /// Owning subject of each row, as an index into the dataset.
    pub subject_of_row: Vec<usize>,
}

impl TrainingSet {
    pub fn from_dataset(ds: &Dataset) -> Self {
        let mut out = Self::default();
        for (i, s) in ds.subjects.iter().enumerate() {
            let x = s.input();
            for v in &s.visits {
                let mut row = x.clone();
                row.push(v.time as f64);
                out.rows.push(row);
                out.targets.push(v.value);
                out.subject_of_row.push(i);
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Gp,
    Quantile,
    Bootstrap,
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictorKind::Gp => "gp",
            PredictorKind::Quantile => "quantile",
            PredictorKind::Bootstrap => "bootstrap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub gp: GpConfig,
    pub quantile: QuantileConfig,
    pub bootstrap: BootstrapConfig,
    /// Multiplier on the predictive std; values below 1 make the model overconfident.
    pub std_scale: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Gp,
            gp: GpConfig::default(),
            quantile: QuantileConfig::default(),
            bootstrap: BootstrapConfig::default(),
            std_scale: 1.0,
        }
    }
}

impl PredictorConfig {
    pub fn of_kind(kind: PredictorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedModel {
    Gp(GpModel),
    Quantile(QuantileModel),
    Bootstrap(BootstrapModel),
}

impl FittedModel {
    pub fn kind(&self) -> PredictorKind {
        match self {
            FittedModel::Gp(_) => PredictorKind::Gp,
            FittedModel::Quantile(_) => PredictorKind::Quantile,
            FittedModel::Bootstrap(_) => PredictorKind::Bootstrap,
        }
    }
}

impl Predictor for FittedModel {
    fn input_dim(&self) -> usize {
        match self {
            FittedModel::Gp(m) => m.input_dim(),
            FittedModel::Quantile(m) => m.input_dim(),
            FittedModel::Bootstrap(m) => m.input_dim(),
        }
    }

    fn predict(&self, x: &[f64], t: u32) -> Result<Prediction, PredictError> {
        match self {
            FittedModel::Gp(m) => m.predict(x, t),
            FittedModel::Quantile(m) => m.predict(x, t),
            FittedModel::Bootstrap(m) => m.predict(x, t),
        }
    }
}

/// Fits the configured predictor on a (standardized) training set.
pub fn fit(train: &Dataset, cfg: &PredictorConfig, seed: u64) -> Result<FittedModel, PredictError> {
    Ok(match cfg.kind {
        PredictorKind::Gp => FittedModel::Gp(fit_gp(train, &cfg.gp, seed)?),
        PredictorKind::Quantile => FittedModel::Quantile(fit_quantile(train, &cfg.quantile)?),
        PredictorKind::Bootstrap => FittedModel::Bootstrap(fit_bootstrap(train, &cfg.bootstrap, seed)?),
    })
}

/// A fitted model with its std multiplier, ready for band construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub fitted: FittedModel,
    pub std_scale: f64,
}

impl Model {
    pub fn fit(train: &Dataset, cfg: &PredictorConfig, seed: u64) -> Result<Self, PredictError> {
        if !(cfg.std_scale > 0.0) {
            return Err(PredictError::Config {
                op: "fit",
                msg: format!("std_scale must be positive, got {}", cfg.std_scale),
            });
        }
        Ok(Self {
            fitted: fit(train, cfg, seed)?,
            std_scale: cfg.std_scale,
        })
    }
}

impl Predictor for Model {
    fn input_dim(&self) -> usize {
        self.fitted.input_dim()
    }

    fn predict(&self, x: &[f64], t: u32) -> Result<Prediction, PredictError> {
        let p = self.fitted.predict(x, t)?;
        if self.std_scale == 1.0 {
            Ok(p)
        } else {
            Ok(Prediction::floored(p.mean, p.std * self.std_scale))
        }
    }
}

pub const MODEL_SCHEMA: &str = "conftraj.model/1";

#[derive(Serialize, Deserialize)]
struct ModelDocument<T> {
    schema: String,
    #[serde(flatten)]
    body: T,
}

/// Writes any serializable artifact tagged with the model schema version.
pub fn save_json<T: Serialize>(body: &T, path: impl AsRef<Path>) -> Result<(), PredictError> {
    let doc = ModelDocument {
        schema: MODEL_SCHEMA.to_string(),
        body,
    };
    let text = serde_json::to_string(&doc).map_err(|e| PredictError::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| PredictError::Format(e.to_string()))
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T, PredictError> {
    let text = std::fs::read_to_string(path).map_err(|e| PredictError::Format(e.to_string()))?;
    let doc: ModelDocument<T> =
        serde_json::from_str(&text).map_err(|e| PredictError::Format(e.to_string()))?;
    if doc.schema != MODEL_SCHEMA {
        return Err(PredictError::Format(format!(
            "unsupported model schema `{}`, expected `{MODEL_SCHEMA}`",
            doc.schema
        )));
    }
    Ok(doc.body)
}
