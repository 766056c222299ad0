//! Split-conformal bands for randomly-timed trajectories.
//!
//! A calibration subject's nonconformity score is its worst normalised
//! residual over the visits it actually has,
//!
//! ```text
//! R_i = max_t |y_t - mean_t| / std_t
//! ```
//!
//! and the conformal radius `R` is the `ceil((n + 1)(1 - alpha))`-th smallest
//! score, or unbounded when that rank exceeds `n`. The band at any month `t`
//! is the closed interval `mean_t ± R * std_t`. Group-conditional (Mondrian)
//! calibration repeats the rank selection within each category of one
//! grouping column.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, SubjectRecord};
use crate::error::{ConformalError, DataError};
use crate::predictors::{Prediction, Predictor};

/// Longest follow-up in the reference cohort, in months.
pub const DEFAULT_T_MAX: u32 = 153;

/// Months `1..=t_max`.
pub fn time_grid(t_max: u32) -> Vec<u32> {
    (1..=t_max).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonconformityScore {
    pub subject_id: String,
    pub value: f64,
}

/// The conformal radius; the unbounded case is a flag, never a float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Radius {
    Finite(f64),
    Infinite,
}

impl Radius {
    pub fn is_finite(&self) -> bool {
        matches!(self, Radius::Finite(_))
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Radius::Finite(r) => Some(r),
            Radius::Infinite => None,
        }
    }
}

impl Serialize for Radius {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            Radius::Finite(r) => s.serialize_f64(r),
            Radius::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Radius {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(r) => Ok(Radius::Finite(r)),
            Raw::Text(t) if t == "inf" => Ok(Radius::Infinite),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid radius `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub n: usize,
    pub rank: usize,
    pub radius: Radius,
    pub scores_sorted: Vec<f64>,
}

impl CalibrationResult {
    pub fn is_finite(&self) -> bool {
        self.radius.is_finite()
    }
}

pub fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(ConformalError::InvalidAlpha(alpha))
    }
}

/// `ceil((n + 1)(1 - alpha))`, snapping products that land within rounding
/// error of an integer (e.g. `100 * 0.9`) onto that integer.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Worst normalised residual over the subject's visits.
pub fn score_subject(s: &SubjectRecord, preds: &[Prediction]) -> Result<NonconformityScore, ConformalError> {
    if s.visits.is_empty() {
        return Err(ConformalError::EmptyTrajectory(s.subject_id.clone()));
    }
    if preds.len() != s.visits.len() {
        return Err(ConformalError::Misaligned {
            subject: s.subject_id.clone(),
            visits: s.visits.len(),
            preds: preds.len(),
        });
    }
    let value = s
        .visits
        .iter()
        .zip(preds)
        .map(|(v, p)| (v.value - p.mean).abs() / p.std)
        .fold(0.0, f64::max);
    Ok(NonconformityScore {
        subject_id: s.subject_id.clone(),
        value,
    })
}

/// Scores every subject with at least one visit; the rest are skipped and
/// counted in the log.
pub fn score_dataset<P: Predictor + ?Sized>(
    model: &P,
    ds: &Dataset,
) -> Result<Vec<NonconformityScore>, ConformalError> {
    let skipped = ds.n_empty();
    if skipped > 0 {
        log::warn!("score_dataset: {skipped} subject(s) without visits excluded from calibration");
    }
    ds.scorable()
        .map(|s| {
            let preds = model.predict_trajectory(&s.input(), &s.visit_times())?;
            score_subject(s, &preds)
        })
        .collect()
}

pub fn calibrate(scores: &[NonconformityScore], alpha: f64) -> Result<CalibrationResult, ConformalError> {
    let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    calibrate_values(&values, alpha)
}

/// Rank selection over raw score values.
pub fn calibrate_values(values: &[f64], alpha: f64) -> Result<CalibrationResult, ConformalError> {
    check_alpha(alpha)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = conformal_rank(n, alpha);
    let radius = if rank >= 1 && rank <= n {
        Radius::Finite(sorted[rank - 1])
    } else {
        Radius::Infinite
    };
    Ok(CalibrationResult {
        alpha,
        n,
        rank,
        radius,
        scores_sorted: sorted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBand {
    pub subject_id: String,
    pub times: Vec<u32>,
    pub centers: Vec<f64>,
    /// Half-widths `R * std_t`; `None` when the radius is unbounded.
    pub radii: Option<Vec<f64>>,
}

impl PredictionBand {
    pub fn is_finite(&self) -> bool {
        self.radii.is_some()
    }

    fn position(&self, t: u32) -> Option<usize> {
        self.times.binary_search(&t).ok().or_else(|| self.times.iter().position(|&u| u == t))
    }

    /// Closed interval at month `t`, infinite endpoints for unbounded bands.
    pub fn interval_at(&self, t: u32) -> Option<(f64, f64)> {
        let i = self.position(t)?;
        let c = self.centers[i];
        Some(match &self.radii {
            Some(r) => (c - r[i], c + r[i]),
            None => (f64::NEG_INFINITY, f64::INFINITY),
        })
    }

    pub fn radius_at(&self, t: u32) -> Option<Option<f64>> {
        let i = self.position(t)?;
        Some(self.radii.as_ref().map(|r| r[i]))
    }
}

/// Band from predictions already computed at `times`.
pub fn band_from_predictions(subject_id: &str, times: &[u32], preds: &[Prediction], radius: Radius) -> PredictionBand {
    PredictionBand {
        subject_id: subject_id.to_string(),
        times: times.to_vec(),
        centers: preds.iter().map(|p| p.mean).collect(),
        radii: radius.value().map(|r| preds.iter().map(|p| r * p.std).collect()),
    }
}

pub fn build_band<P: Predictor + ?Sized>(
    model: &P,
    subject_id: &str,
    x: &[f64],
    times: &[u32],
    cal: &CalibrationResult,
) -> Result<PredictionBand, ConformalError> {
    band_with_radius(model, subject_id, x, times, cal.radius)
}

pub fn band_with_radius<P: Predictor + ?Sized>(
    model: &P,
    subject_id: &str,
    x: &[f64],
    times: &[u32],
    radius: Radius,
) -> Result<PredictionBand, ConformalError> {
    if times.is_empty() {
        return Err(ConformalError::EmptyTimes);
    }
    let preds = model.predict_trajectory(x, times)?;
    Ok(band_from_predictions(subject_id, times, &preds, radius))
}

/// Two-sided standard-normal quantile `z_{1 - alpha/2}`.
pub fn gaussian_multiplier(alpha: f64) -> Result<f64, ConformalError> {
    check_alpha(alpha)?;
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// Non-conformal comparison band `mean ± z_{1-alpha/2} * std`.
pub fn baseline_band<P: Predictor + ?Sized>(
    model: &P,
    subject_id: &str,
    x: &[f64],
    times: &[u32],
    alpha: f64,
) -> Result<PredictionBand, ConformalError> {
    band_with_radius(model, subject_id, x, times, Radius::Finite(gaussian_multiplier(alpha)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCalibration {
    pub grouping_column: String,
    pub per_group: BTreeMap<String, CalibrationResult>,
    pub fallback: CalibrationResult,
}

pub fn mondrian_calibrate(
    calib: &Dataset,
    scores: &[NonconformityScore],
    grouping_column: &str,
    alpha: f64,
) -> Result<GroupCalibration, ConformalError> {
    check_alpha(alpha)?;
    let by_id: HashMap<&str, f64> = scores.iter().map(|s| (s.subject_id.as_str(), s.value)).collect();
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut all = Vec::with_capacity(scores.len());
    for s in calib.scorable() {
        let label = s.group(grouping_column).ok_or_else(|| DataError::MissingGroupLabel {
            subject: s.subject_id.clone(),
            column: grouping_column.to_string(),
        })?;
        let value = *by_id
            .get(s.subject_id.as_str())
            .ok_or_else(|| ConformalError::MissingScore(s.subject_id.clone()))?;
        groups.entry(label.to_string()).or_default().push(value);
        all.push(value);
    }
    let per_group = groups
        .into_iter()
        .map(|(g, v)| Ok((g, calibrate_values(&v, alpha)?)))
        .collect::<Result<_, ConformalError>>()?;
    Ok(GroupCalibration {
        grouping_column: grouping_column.to_string(),
        per_group,
        fallback: calibrate_values(&all, alpha)?,
    })
}

/// Population or group-conditional calibration.
#[derive(Debug, Clone, PartialEq)]
pub enum Calibration {
    Population(CalibrationResult),
    Grouped(GroupCalibration),
}

impl Calibration {
    /// The calibration that applies to `s`. Unseen categories use the
    /// population fallback when `allow_fallback` is set.
    pub fn select(&self, s: &SubjectRecord, allow_fallback: bool) -> Result<&CalibrationResult, ConformalError> {
        match self {
            Calibration::Population(c) => Ok(c),
            Calibration::Grouped(g) => {
                let label = s.group(&g.grouping_column).unwrap_or("");
                match g.per_group.get(label) {
                    Some(c) => Ok(c),
                    None if allow_fallback => {
                        log::warn!(
                            "subject `{}`: category `{label}` of `{}` unseen in calibration, using population radius",
                            s.subject_id,
                            g.grouping_column
                        );
                        Ok(&g.fallback)
                    }
                    None => Err(ConformalError::UnseenGroup {
                        subject: s.subject_id.clone(),
                        column: g.grouping_column.clone(),
                        category: label.to_string(),
                    }),
                }
            }
        }
    }
}

pub fn band_for_subject<P: Predictor + ?Sized>(
    model: &P,
    s: &SubjectRecord,
    cal: &Calibration,
    times: &[u32],
    allow_fallback: bool,
) -> Result<PredictionBand, ConformalError> {
    let c = cal.select(s, allow_fallback)?;
    build_band(model, &s.subject_id, &s.input(), times, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Visit;
    use crate::error::PredictError;

    fn subject(id: &str, visits: &[(u32, f64)], group: Option<&str>) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.to_string(),
            features: vec![],
            group_labels: group
                .map(|g| BTreeMap::from([("dx".to_string(), g.to_string())]))
                .unwrap_or_default(),
            baseline_value: 0.0,
            visits: visits.iter().map(|&(time, value)| Visit { time, value }).collect(),
        }
    }

    fn p(mean: f64, std: f64) -> Prediction {
        Prediction { mean, std }
    }

    /// Mean 1 everywhere, std 0.5.
    struct Flat;

    impl Predictor for Flat {
        fn input_dim(&self) -> usize {
            1
        }
        fn predict(&self, _: &[f64], _: u32) -> Result<Prediction, PredictError> {
            Ok(p(1.0, 0.5))
        }
    }

    #[test]
    fn score_is_max_ratio() {
        let s = subject("a", &[(1, 0.2), (2, 0.6)], None);
        let sc = score_subject(&s, &[p(0.0, 0.1), p(0.0, 0.3)]).unwrap();
        assert!((sc.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let s = subject("a", &[(1, 0.2), (2, 0.6)], None);
        assert_eq!(score_subject(&s, &[p(0.2, 0.1), p(0.6, 0.3)]).unwrap().value, 0.0);
    }

    #[test]
    fn single_visit_score() {
        let s = subject("a", &[(3, 0.5)], None);
        assert_eq!(score_subject(&s, &[p(0.0, 0.25)]).unwrap().value, 2.0);
    }

    #[test]
    fn empty_visits_undefined() {
        let s = subject("a", &[], None);
        assert!(matches!(score_subject(&s, &[]), Err(ConformalError::EmptyTrajectory(_))));
    }

    #[test]
    fn calibrate_examples() {
        let c = calibrate_values(&[2.0, 0.5, 1.2, 0.8], 0.5).unwrap();
        assert_eq!(c.rank, 3);
        assert_eq!(c.radius, Radius::Finite(1.2));
        let c = calibrate_values(&[2.0, 0.5, 1.2, 0.8], 0.1).unwrap();
        assert_eq!(c.rank, 5);
        assert_eq!(c.radius, Radius::Infinite);
        let c = calibrate_values(&[], 0.3).unwrap();
        assert_eq!(c.radius, Radius::Infinite);
    }

    #[test]
    fn rank_snaps_exact_products() {
        assert_eq!(conformal_rank(99, 0.1), 90);
        assert_eq!(conformal_rank(500, 0.1), 451);
        assert_eq!(conformal_rank(9, 0.5), 5);
        assert_eq!(conformal_rank(3, 0.1), 4);
    }

    #[test]
    fn alpha_outside_unit_interval() {
        for a in [0.0, 1.0, 1.5, -0.1, f64::NAN] {
            assert!(matches!(calibrate_values(&[1.0], a), Err(ConformalError::InvalidAlpha(_))));
        }
        let msg = calibrate_values(&[1.0], 1.5).unwrap_err().to_string();
        assert!(msg.contains("conformal.calibrate"));
    }

    #[test]
    fn band_arithmetic() {
        let cal = CalibrationResult {
            alpha: 0.1,
            n: 0,
            rank: 0,
            radius: Radius::Finite(2.0),
            scores_sorted: vec![],
        };
        let b = build_band(&Flat, "a", &[0.0], &[6], &cal).unwrap();
        assert_eq!(b.interval_at(6), Some((0.0, 2.0)));
        assert_eq!(b.interval_at(7), None);
    }

    #[test]
    fn zero_and_infinite_radius() {
        let b = band_with_radius(&Flat, "a", &[0.0], &[1, 2], Radius::Finite(0.0)).unwrap();
        assert_eq!(b.interval_at(2), Some((1.0, 1.0)));
        let b = band_with_radius(&Flat, "a", &[0.0], &[1, 2], Radius::Infinite).unwrap();
        assert!(!b.is_finite());
        assert_eq!(b.interval_at(1), Some((f64::NEG_INFINITY, f64::INFINITY)));
        assert!(matches!(
            band_with_radius(&Flat, "a", &[0.0], &[], Radius::Infinite),
            Err(ConformalError::EmptyTimes)
        ));
    }

    #[test]
    fn radius_json_round_trip() {
        let c = calibrate_values(&[1.0, 2.0], 0.1).unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"radius\":\"inf\""));
        assert_eq!(serde_json::from_str::<CalibrationResult>(&text).unwrap(), c);
    }

    fn grouped_calib(sizes: &[(&str, usize)]) -> (Dataset, Vec<NonconformityScore>) {
        let mut subjects = Vec::new();
        let mut scores = Vec::new();
        let mut k = 0;
        for (g, n) in sizes {
            for i in 0..*n {
                let id = format!("{g}{i}");
                subjects.push(subject(&id, &[(1, 0.0)], Some(g)));
                scores.push(NonconformityScore {
                    subject_id: id,
                    value: ((k * 7919) % 101) as f64 / 10.0,
                });
                k += 1;
            }
        }
        (Dataset::new(subjects, vec![], vec!["dx".into()]).unwrap(), scores)
    }

    #[test]
    fn mondrian_equal_groups() {
        let (ds, scores) = grouped_calib(&[("CN", 9), ("MCI", 9)]);
        let g = mondrian_calibrate(&ds, &scores, "dx", 0.5).unwrap();
        for (name, c) in &g.per_group {
            assert_eq!(c.rank, 5);
            let mut own: Vec<f64> = scores
                .iter()
                .filter(|s| s.subject_id.starts_with(name.as_str()))
                .map(|s| s.value)
                .collect();
            own.sort_by(f64::total_cmp);
            assert_eq!(c.radius, Radius::Finite(own[4]));
        }
        assert_eq!(g.fallback.n, 18);
    }

    #[test]
    fn small_group_is_unbounded() {
        let (ds, scores) = grouped_calib(&[("AD", 3), ("CN", 40)]);
        let g = mondrian_calibrate(&ds, &scores, "dx", 0.1).unwrap();
        assert_eq!(g.per_group["AD"].rank, 4);
        assert_eq!(g.per_group["AD"].radius, Radius::Infinite);
        assert!(g.per_group["CN"].is_finite());
    }

    #[test]
    fn missing_group_label_names_subject() {
        let ds = Dataset::new(vec![subject("x1", &[(1, 0.0)], None)], vec![], vec![]).unwrap();
        let scores = vec![NonconformityScore {
            subject_id: "x1".into(),
            value: 1.0,
        }];
        let err = mondrian_calibrate(&ds, &scores, "dx", 0.1).unwrap_err();
        assert!(err.to_string().contains("x1"));
    }

    #[test]
    fn dispatch_by_group() {
        let (ds, scores) = grouped_calib(&[("CN", 30), ("MCI", 30)]);
        let g = mondrian_calibrate(&ds, &scores, "dx", 0.2).unwrap();
        let r_mci = g.per_group["MCI"].radius.value().unwrap();
        let cal = Calibration::Grouped(g.clone());
        let s = subject("new", &[(5, 0.0)], Some("MCI"));
        let b = band_for_subject(&Flat, &s, &cal, &[5], false).unwrap();
        assert_eq!(b.radius_at(5), Some(Some(r_mci * 0.5)));

        let other = subject("o", &[(5, 0.0)], Some("Other"));
        assert!(matches!(
            band_for_subject(&Flat, &other, &cal, &[5], false),
            Err(ConformalError::UnseenGroup { .. })
        ));
        let b = band_for_subject(&Flat, &other, &cal, &[5], true).unwrap();
        assert_eq!(b.radius_at(5), Some(Some(g.fallback.radius.value().unwrap() * 0.5)));
    }

    #[test]
    fn population_dispatch_matches_build_band() {
        let cal = calibrate_values(&[0.3, 1.1, 0.7, 2.2, 0.1], 0.4).unwrap();
        let s = subject("a", &[(2, 0.0)], Some("CN"));
        let via_subject = band_for_subject(&Flat, &s, &Calibration::Population(cal.clone()), &[2, 9], false).unwrap();
        let direct = build_band(&Flat, "a", &s.input(), &[2, 9], &cal).unwrap();
        assert_eq!(via_subject, direct);
    }
}
