//! Linear quantile regression trained with full-batch subgradient descent on
//! the pinball loss.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{check_dim, InputScaler, Prediction, Predictor, TrainingSet};
use crate::data::Dataset;
use crate::error::PredictError;

const CHECKPOINT_EVERY: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantileConfig {
    /// Lower, median and upper quantile levels.
    pub levels: [f64; 3],
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for QuantileConfig {
    fn default() -> Self {
        Self {
            levels: [0.1, 0.5, 0.9],
            steps: 4000,
            learning_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileModel {
    pub scaler: InputScaler,
    pub levels: [f64; 3],
    /// Per level: one weight per scaled input column, intercept last.
    pub weights: [Vec<f64>; 3],
    /// Divisor that turns the half-spread `(hi - lo) / 2` into a std.
    pub z_score: f64,
    /// Total pinball loss (summed over levels) at each accepted checkpoint.
    pub checkpoints: Vec<f64>,
}

/// `rho_q(u) = u * (q - 1{u < 0})`.
pub fn pinball_loss(u: f64, q: f64) -> f64 {
    if u < 0.0 {
        u * (q - 1.0)
    } else {
        u * q
    }
}

/// Standard-normal quantile for the confidence level carried by the upper
/// quantile: levels `{0.1, 0.9}` describe a 90% band, giving `z = 1.6449`.
pub fn z_for_levels(levels: &[f64; 3]) -> f64 {
    let normal = Normal::standard();
    normal.inverse_cdf((1.0 + levels[2]) / 2.0)
}

fn affine(w: &[f64], z: &[f64]) -> f64 {
    let (slope, intercept) = w.split_at(z.len());
    slope.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() + intercept[0]
}

fn mean_loss(w: &[f64], rows: &[Vec<f64>], y: &[f64], q: f64) -> f64 {
    rows.iter()
        .zip(y)
        .map(|(z, &t)| pinball_loss(t - affine(w, z), q))
        .sum::<f64>()
        / rows.len() as f64
}

/// Descends one level, keeping the best iterate seen. Every
/// `CHECKPOINT_EVERY` steps the current loss is compared with the last
/// checkpoint; an increase, or a window without any improvement, restores the
/// best iterate and halves the step size. Recorded checkpoints therefore
/// never increase.
fn descend(
    rows: &[Vec<f64>],
    y: &[f64],
    q: f64,
    steps: usize,
    lr0: f64,
) -> Result<(Vec<f64>, Vec<f64>), PredictError> {
    let p = rows[0].len();
    let n = rows.len() as f64;
    let mut w = vec![0.0; p + 1];
    let mut grad = vec![0.0; p + 1];
    let mut lr = lr0;
    let mut best_w = w.clone();
    let mut best_loss = mean_loss(&w, rows, y, q);
    let mut last_checkpoint = best_loss;
    let mut history = vec![best_loss];

    for step in 1..=steps {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for (z, &t) in rows.iter().zip(y) {
            let u = t - affine(&w, z);
            loss += pinball_loss(u, q);
            // d rho / d pred = -(q - 1{u < 0})
            let g = if u < 0.0 { 1.0 - q } else { -q };
            for (gj, zj) in grad.iter_mut().zip(z) {
                *gj += g * zj;
            }
            grad[p] += g;
        }
        loss /= n;
        if !loss.is_finite() {
            return Err(PredictError::Diverged { step });
        }
        if loss < best_loss {
            best_loss = loss;
            best_w.clone_from(&w);
        }
        let eta = lr / (1.0 + step as f64 / CHECKPOINT_EVERY as f64).sqrt();
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= eta * gj / n;
        }

        if step % CHECKPOINT_EVERY == 0 || step == steps {
            let loss = mean_loss(&w, rows, y, q);
            if !loss.is_finite() {
                return Err(PredictError::Diverged { step });
            }
            if loss < best_loss {
                best_loss = loss;
                best_w.clone_from(&w);
            }
            if loss > last_checkpoint || best_loss >= last_checkpoint {
                w.clone_from(&best_w);
                lr *= 0.5;
            }
            last_checkpoint = best_loss;
            history.push(best_loss);
        }
    }
    Ok((best_w, history))
}

pub fn fit_quantile(train: &Dataset, cfg: &QuantileConfig) -> Result<QuantileModel, PredictError> {
    let set = TrainingSet::from_dataset(train);
    QuantileModel::fit_rows(&set.rows, &set.targets, cfg)
}

impl QuantileModel {
    pub fn fit_rows(rows: &[Vec<f64>], targets: &[f64], cfg: &QuantileConfig) -> Result<Self, PredictError> {
        if rows.is_empty() {
            return Err(PredictError::EmptyTraining { op: "fit_quantile" });
        }
        let [lo, mid, hi] = cfg.levels;
        if !(0.0 < lo && lo < mid && mid < hi && hi < 1.0) || (lo + hi - 1.0).abs() > 1e-9 {
            return Err(PredictError::Config {
                op: "fit_quantile",
                msg: format!("levels must be increasing in (0, 1) and symmetric, got {:?}", cfg.levels),
            });
        }
        if !(cfg.learning_rate > 0.0) {
            return Err(PredictError::Config {
                op: "fit_quantile",
                msg: format!("learning rate must be positive, got {}", cfg.learning_rate),
            });
        }
        let scaler = InputScaler::fit(rows);
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| scaler.transform_row(r)).collect();

        let mut weights: [Vec<f64>; 3] = Default::default();
        let mut checkpoints: Vec<f64> = Vec::new();
        for (k, &q) in cfg.levels.iter().enumerate() {
            let (w, hist) = descend(&scaled, targets, q, cfg.steps, cfg.learning_rate)?;
            weights[k] = w;
            if checkpoints.is_empty() {
                checkpoints = hist;
            } else {
                checkpoints.iter_mut().zip(hist).for_each(|(c, h)| *c += h);
            }
        }
        Ok(Self {
            scaler,
            levels: cfg.levels,
            weights,
            z_score: z_for_levels(&cfg.levels),
            checkpoints,
        })
    }

    /// Total pinball objective of the given weights on raw rows.
    pub fn objective(&self, rows: &[Vec<f64>], targets: &[f64]) -> f64 {
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| self.scaler.transform_row(r)).collect();
        self.levels
            .iter()
            .zip(&self.weights)
            .map(|(&q, w)| mean_loss(w, &scaled, targets, q))
            .sum()
    }

    /// Lower, median and upper predictions, sorted to repair crossings.
    pub fn predict_quantiles(&self, x: &[f64], t: u32) -> Result<[f64; 3], PredictError> {
        check_dim(x.len(), self.input_dim())?;
        let z = self.scaler.transform(x, t);
        let mut q = [
            affine(&self.weights[0], &z),
            affine(&self.weights[1], &z),
            affine(&self.weights[2], &z),
        ];
        q.sort_by(f64::total_cmp);
        Ok(q)
    }

    /// Median as the mean, half-spread over `z_score` as the std.
    pub fn prediction_from_quantiles(&self, raw: [f64; 3]) -> Prediction {
        let mut q = raw;
        q.sort_by(f64::total_cmp);
        Prediction::floored(q[1], (q[2] - q[0]) / (2.0 * self.z_score))
    }
}

impl Predictor for QuantileModel {
    fn input_dim(&self) -> usize {
        self.scaler.dim() - 1
    }

    fn predict(&self, x: &[f64], t: u32) -> Result<Prediction, PredictError> {
        Ok(self.prediction_from_quantiles(self.predict_quantiles(x, t)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictors::SIGMA_FLOOR;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn dummy(z: f64) -> QuantileModel {
        QuantileModel {
            scaler: InputScaler::identity(2),
            levels: [0.1, 0.5, 0.9],
            weights: [vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]],
            z_score: z,
            checkpoints: vec![],
        }
    }

    #[test]
    fn z_for_ten_ninety() {
        assert!((z_for_levels(&[0.1, 0.5, 0.9]) - 1.6449).abs() < 1e-4);
    }

    #[test]
    fn symmetric_quantiles_give_unit_std() {
        let m = dummy(z_for_levels(&[0.1, 0.5, 0.9]));
        let p = m.prediction_from_quantiles([-1.6449, 0.0, 1.6449]);
        assert!((p.std - 1.0).abs() < 1e-4);
    }

    #[test]
    fn equal_quantiles_hit_floor() {
        let p = dummy(1.6449).prediction_from_quantiles([0.3, 0.3, 0.3]);
        assert_eq!(p.std, SIGMA_FLOOR);
    }

    #[test]
    fn crossing_is_rearranged() {
        let m = dummy(1.0);
        let p = m.prediction_from_quantiles([0.5, 0.2, 0.9]);
        assert_eq!(p.mean, 0.5);
        assert!((p.std - 0.35).abs() < 1e-12);
    }

    #[test]
    fn pinball_definition() {
        assert_eq!(pinball_loss(2.0, 0.9), 1.8);
        assert!((pinball_loss(-2.0, 0.9) - 0.2).abs() < 1e-12);
        assert_eq!(pinball_loss(0.0, 0.3), 0.0);
    }

    fn rows_1d(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut noise = Vec::new();
        for i in 0..n {
            let x: f64 = rng.random_range(-2.0..2.0);
            let e: f64 = rng.sample(StandardNormal);
            rows.push(vec![x, (i % 24 + 1) as f64]);
            y.push(0.5 * x + e);
            noise.push(e);
        }
        (rows, y, noise)
    }

    #[test]
    fn constant_targets_converge() {
        let (rows, _, _) = rows_1d(200, 1);
        for c in [-2.5, 0.0, 3.0] {
            let y = vec![c; rows.len()];
            let m = QuantileModel::fit_rows(&rows, &y, &QuantileConfig::default()).unwrap();
            for r in rows.iter().take(20) {
                let q = m.predict_quantiles(&r[..1], r[1] as u32).unwrap();
                for v in q {
                    assert!((v - c).abs() < 1e-3, "c = {c}, got {v}");
                }
            }
        }
    }

    #[test]
    fn checkpoints_never_increase() {
        let (rows, y, _) = rows_1d(300, 2);
        let cfg = QuantileConfig {
            learning_rate: 5.0,
            ..QuantileConfig::default()
        };
        let m = QuantileModel::fit_rows(&rows, &y, &cfg).unwrap();
        assert!(m.checkpoints.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.objective(&rows, &y) <= m.checkpoints[0] + 1e-12);
    }

    #[test]
    fn upper_quantile_offset_matches_noise_quantile() {
        let (rows, y, mut noise) = rows_1d(2000, 3);
        noise.sort_by(f64::total_cmp);
        // empirical 0.9 quantile of the generated noise
        let oracle = noise[(0.9 * noise.len() as f64) as usize];
        let m = QuantileModel::fit_rows(&rows, &y, &QuantileConfig::default()).unwrap();
        let mut offsets = 0.0;
        for r in &rows {
            let q = m.predict_quantiles(&r[..1], r[1] as u32).unwrap();
            offsets += q[2] - 0.5 * r[0];
        }
        let offset = offsets / rows.len() as f64;
        assert!((offset - oracle).abs() < 0.15, "offset {offset}, oracle {oracle}");
        assert!((offset - 1.2816).abs() < 0.15);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let (rows, y, _) = rows_1d(50, 4);
        let cfg = QuantileConfig {
            learning_rate: 1e308,
            ..QuantileConfig::default()
        };
        assert!(matches!(
            QuantileModel::fit_rows(&rows, &y, &cfg),
            Err(PredictError::Diverged { .. })
        ));
    }

    #[test]
    fn bad_levels_rejected() {
        let (rows, y, _) = rows_1d(10, 5);
        let cfg = QuantileConfig {
            levels: [0.2, 0.5, 0.9],
            ..QuantileConfig::default()
        };
        assert!(QuantileModel::fit_rows(&rows, &y, &cfg).is_err());
    }
}
