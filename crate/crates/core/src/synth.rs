//! Synthetic cohorts of randomly-timed biomarker trajectories.
//!
//! Subjects are drawn i.i.d., so any split of a generated cohort is
//! exchangeable. Each subject follows
//!
//! ```text
//! y_t = b + s * t + eps_t,   eps_t ~ N(0, (noise_std * group_scale)^2)
//! s   = slope(progressor) + feature_slope_effect * x_1 + heterogeneity * N(0, 1)
//! ```
//!
//! with features `x ~ N(0, I)` (the first feature shifted by
//! `progressor_signal` for progressors), baseline level `b ~ N(0, baseline_std^2)`
//! and the month-0 observation `y_0 = b + eps_0`.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectRecord, Visit};
use crate::error::{DataError, SynthError};
use crate::risk::Direction;

/// A categorical column of the synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub column: String,
    pub categories: Vec<String>,
    pub probabilities: Vec<f64>,
    /// Per-category progressor rate; overrides the global rate. Only the
    /// first column that sets this is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progressor_frac: Option<Vec<f64>>,
    /// Per-category multiplier on the observation noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_scale: Option<Vec<f64>>,
}

impl GroupSpec {
    pub fn new(column: &str, categories: &[&str], probabilities: &[f64]) -> Self {
        Self {
            column: column.to_string(),
            categories: categories.iter().map(|c| c.to_string()).collect(),
            probabilities: probabilities.to_vec(),
            progressor_frac: None,
            noise_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub feature_dim: usize,
    pub max_time: u32,
    pub visits_mean: f64,
    pub noise_std: f64,
    pub progressor_frac: f64,
    pub slope_stable: f64,
    pub slope_progressor: f64,
    pub slope_heterogeneity: f64,
    pub feature_slope_effect: f64,
    pub progressor_signal: f64,
    pub baseline_std: f64,
    pub group_spec: Vec<GroupSpec>,
    pub direction: Direction,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mut diagnosis = GroupSpec::new("diagnosis", &["CN", "MCI", "AD"], &[0.4, 0.4, 0.2]);
        diagnosis.progressor_frac = Some(vec![0.15, 0.45, 0.6]);
        Self {
            n_subjects: 2200,
            feature_dim: 4,
            max_time: 120,
            visits_mean: 5.0,
            noise_std: 0.1,
            progressor_frac: 0.35,
            slope_stable: -0.004,
            slope_progressor: -0.015,
            slope_heterogeneity: 0.003,
            feature_slope_effect: -0.003,
            progressor_signal: 0.8,
            baseline_std: 1.0,
            group_spec: vec![
                GroupSpec::new("sex", &["F", "M"], &[0.5, 0.5]),
                diagnosis,
            ],
            direction: Direction::Decreasing,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Config(m));
        if self.n_subjects == 0 {
            return fail("n_subjects must be positive".into());
        }
        if self.feature_dim == 0 {
            return fail("feature_dim must be positive".into());
        }
        if self.max_time == 0 {
            return fail("max_time must be positive".into());
        }
        if !(self.visits_mean >= 1.0) {
            return fail(format!("visits_mean must be at least 1, got {}", self.visits_mean));
        }
        if !(self.noise_std >= 0.0) || !(self.slope_heterogeneity >= 0.0) || !(self.baseline_std >= 0.0) {
            return fail("noise_std, slope_heterogeneity and baseline_std must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.progressor_frac) {
            return fail(format!("progressor_frac must lie in [0, 1], got {}", self.progressor_frac));
        }
        let steeper = match self.direction {
            Direction::Decreasing => self.slope_progressor < self.slope_stable,
            Direction::Increasing => self.slope_progressor > self.slope_stable,
        };
        if !steeper {
            return fail(format!(
                "slope_progressor ({}) must be steeper than slope_stable ({}) in the {:?} direction",
                self.slope_progressor, self.slope_stable, self.direction
            ));
        }
        for g in &self.group_spec {
            let k = g.categories.len();
            if k == 0 || g.probabilities.len() != k {
                return fail(format!("group `{}`: categories and probabilities differ in length", g.column));
            }
            if g.probabilities.iter().any(|p| !(*p >= 0.0)) || (g.probabilities.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return fail(format!("group `{}`: probabilities must be non-negative and sum to 1", g.column));
            }
            if let Some(r) = &g.progressor_frac {
                if r.len() != k || r.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return fail(format!("group `{}`: progressor_frac needs one rate in [0, 1] per category", g.column));
                }
            }
            if let Some(s) = &g.noise_scale {
                if s.len() != k || s.iter().any(|v| !(*v >= 0.0)) {
                    return fail(format!("group `{}`: noise_scale needs one non-negative value per category", g.column));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub is_progressor: bool,
    pub true_slope: f64,
}

pub type TruthMap = BTreeMap<String, GroundTruth>;

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, TruthMap), SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let extra_visits = if cfg.visits_mean > 1.0 {
        Some(Poisson::new(cfg.visits_mean - 1.0).map_err(|e| SynthError::Config(e.to_string()))?)
    } else {
        None
    };
    let width = cfg.n_subjects.to_string().len().max(4);

    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut truth = TruthMap::new();
    for i in 0..cfg.n_subjects {
        let subject_id = format!("S{:0width$}", i + 1);

        let mut group_labels = BTreeMap::new();
        let mut progressor_rate = cfg.progressor_frac;
        let mut rate_set = false;
        let mut noise_scale = 1.0;
        for g in &cfg.group_spec {
            let k = categorical(&mut rng, &g.probabilities);
            group_labels.insert(g.column.clone(), g.categories[k].clone());
            if let (Some(r), false) = (&g.progressor_frac, rate_set) {
                progressor_rate = r[k];
                rate_set = true;
            }
            if let Some(s) = &g.noise_scale {
                noise_scale *= s[k];
            }
        }
        let is_progressor = rng.random::<f64>() < progressor_rate;

        let mut features: Vec<f64> = (0..cfg.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
        if is_progressor {
            features[0] += cfg.progressor_signal;
        }
        let driver = features.get(1).copied().unwrap_or(features[0]);
        let base_slope = if is_progressor { cfg.slope_progressor } else { cfg.slope_stable };
        let z: f64 = rng.sample(StandardNormal);
        let true_slope = base_slope + cfg.feature_slope_effect * driver + cfg.slope_heterogeneity * z;

        let level = cfg.baseline_std * rng.sample::<f64, _>(StandardNormal);
        let sigma = cfg.noise_std * noise_scale;
        let baseline_value = level + sigma * rng.sample::<f64, _>(StandardNormal);

        let n_visits = (1 + extra_visits.as_ref().map_or(0, |p| p.sample(&mut rng) as usize)).min(cfg.max_time as usize);
        let mut times: Vec<u32> = sample(&mut rng, cfg.max_time as usize, n_visits)
            .into_iter()
            .map(|t| t as u32 + 1)
            .collect();
        times.sort_unstable();
        let visits = times
            .into_iter()
            .map(|t| Visit {
                time: t,
                value: level + true_slope * t as f64 + sigma * rng.sample::<f64, _>(StandardNormal),
            })
            .collect();

        truth.insert(
            subject_id.clone(),
            GroundTruth {
                is_progressor,
                true_slope,
            },
        );
        subjects.push(SubjectRecord {
            subject_id,
            features,
            group_labels,
            baseline_value,
            visits,
        });
    }

    let feature_names = (1..=cfg.feature_dim).map(|j| format!("f{j}")).collect();
    let group_columns = cfg.group_spec.iter().map(|g| g.column.clone()).collect();
    let ds = Dataset::new(subjects, feature_names, group_columns).map_err(|e| SynthError::Config(e.to_string()))?;
    Ok((ds, truth))
}

pub fn write_truth_csv<W: Write>(truth: &TruthMap, writer: W) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["subject_id", "is_progressor", "true_slope"])?;
    for (id, t) in truth {
        wtr.write_record([id.clone(), (t.is_progressor as u8).to_string(), t.true_slope.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: std::io::Read>(reader: R) -> Result<TruthMap, DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = TruthMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let get = |i: usize, col: &str| {
            rec.get(i).ok_or_else(|| DataError::MissingColumn(col.to_string()))
        };
        let flag = get(1, "is_progressor")?;
        let is_progressor = match flag.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => {
                return Err(DataError::Parse {
                    row,
                    column: "is_progressor".into(),
                    value: other.into(),
                })
            }
        };
        let slope = get(2, "true_slope")?;
        let true_slope = slope.trim().parse().map_err(|_| DataError::Parse {
            row,
            column: "true_slope".into(),
            value: slope.into(),
        })?;
        out.insert(
            get(0, "subject_id")?.trim().to_string(),
            GroundTruth {
                is_progressor,
                true_slope,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_subjects: 300,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_linear_trajectory() {
        let cfg = SynthConfig {
            n_subjects: 1,
            noise_std: 0.0,
            slope_heterogeneity: 0.0,
            feature_slope_effect: 0.0,
            progressor_frac: 0.0,
            slope_stable: -0.01,
            group_spec: vec![],
            ..SynthConfig::default()
        };
        let (ds, truth) = generate(&cfg).unwrap();
        let s = &ds.subjects[0];
        assert!(!s.visits.is_empty());
        for v in &s.visits {
            assert!((v.value - (s.baseline_value - 0.01 * v.time as f64)).abs() < 1e-12);
        }
        assert_eq!(truth[&s.subject_id].true_slope, -0.01);
    }

    #[test]
    fn no_progressors_when_rate_zero() {
        let cfg = SynthConfig {
            progressor_frac: 0.0,
            group_spec: vec![],
            ..small()
        };
        let (_, truth) = generate(&cfg).unwrap();
        assert!(truth.values().all(|t| !t.is_progressor));
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SynthConfig {
            n_subjects: 2000,
            seed: 11,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn visit_times_valid() {
        let (ds, _) = generate(&small()).unwrap();
        for s in &ds.subjects {
            assert!(!s.visits.is_empty());
            assert!(s.visits.windows(2).all(|w| w[0].time < w[1].time));
            assert!(s.visits.iter().all(|v| (1..=120).contains(&v.time)));
        }
    }

    #[test]
    fn progressor_fraction_within_three_se() {
        let cfg = SynthConfig {
            n_subjects: 2000,
            group_spec: vec![],
            seed: 5,
            ..SynthConfig::default()
        };
        let (_, truth) = generate(&cfg).unwrap();
        let n = truth.len() as f64;
        let frac = truth.values().filter(|t| t.is_progressor).count() as f64 / n;
        let se = (0.35 * 0.65 / n).sqrt();
        assert!((frac - 0.35).abs() < 3.0 * se, "{frac}");
    }

    #[test]
    fn config_errors() {
        let bad = SynthConfig {
            visits_mean: 0.5,
            ..small()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            slope_progressor: 0.0,
            ..small()
        };
        assert!(generate(&bad).is_err());
        let mut bad = small();
        bad.group_spec[0].probabilities = vec![0.5, 0.6];
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn truth_csv_round_trip() {
        let (_, truth) = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_truth_csv(&truth, &mut buf).unwrap();
        assert_eq!(read_truth_csv(buf.as_slice()).unwrap(), truth);
    }
}
