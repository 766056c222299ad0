//! Rate-of-change risk scores and threshold-based stratification.
//!
//! The predicted rate of change between baseline `t0` and horizon `tN` is
//! `(yhat_tN - y_t0) / (tN - t0)`. The rate-of-change bound replaces the point
//! prediction with the band endpoint in the direction of progression: the
//! lower endpoint for biomarkers that fall with disease, the upper one for
//! biomarkers that rise. Subjects are called high-risk when their score is
//! at or beyond a Youden-optimal threshold.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{band_for_subject, Calibration};
use crate::data::{floor_count, Dataset};
use crate::error::{Error, RiskError};
use crate::predictors::Predictor;
use crate::synth::TruthMap;

/// How the biomarker moves as disease progresses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Decreasing,
    Increasing,
}

impl Direction {
    pub fn rule(self) -> HighRiskRule {
        match self {
            Direction::Decreasing => HighRiskRule::AtOrBelow,
            Direction::Increasing => HighRiskRule::AtOrAbove,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Stable,
    Progressor,
}

/// Which side of the threshold is high-risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HighRiskRule {
    /// `score <= tau`
    AtOrBelow,
    /// `score >= tau`
    AtOrAbove,
}

impl HighRiskRule {
    pub fn flags(self, score: f64, tau: f64) -> bool {
        match self {
            HighRiskRule::AtOrBelow => score <= tau,
            HighRiskRule::AtOrAbove => score >= tau,
        }
    }

    /// Threshold that flags nobody.
    pub fn degenerate(self) -> f64 {
        match self {
            HighRiskRule::AtOrBelow => f64::NEG_INFINITY,
            HighRiskRule::AtOrAbove => f64::INFINITY,
        }
    }
}

fn horizon(op: &'static str, t0: u32, tn: u32) -> Result<f64, RiskError> {
    if tn > t0 {
        Ok((tn - t0) as f64)
    } else {
        Err(RiskError::Horizon { op, t0, tn })
    }
}

pub fn roc_hat(y_t0: f64, y_hat_tn: f64, t0: u32, tn: u32) -> Result<f64, RiskError> {
    Ok((y_hat_tn - y_t0) / horizon("roc_hat", t0, tn)?)
}

/// Rate-of-change bound from the band `(lower, upper)` at the horizon.
pub fn rocb(y_t0: f64, band_at_tn: (f64, f64), t0: u32, tn: u32, direction: Direction) -> Result<f64, RiskError> {
    let (lower, upper) = band_at_tn;
    if !lower.is_finite() || !upper.is_finite() {
        return Err(RiskError::InfiniteBand);
    }
    if lower > upper {
        return Err(RiskError::Input {
            op: "rocb",
            msg: format!("band lower {lower} exceeds upper {upper}"),
        });
    }
    let dt = horizon("rocb", t0, tn)?;
    Ok(match direction {
        Direction::Decreasing => (lower - y_t0) / dt,
        Direction::Increasing => (upper - y_t0) / dt,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn tally(scores: &[f64], labels: &[Label], tau: f64, rule: HighRiskRule) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (rule.flags(s, tau), l) {
                (true, Label::Progressor) => c.tp += 1,
                (true, Label::Stable) => c.fp += 1,
                (false, Label::Stable) => c.tn += 1,
                (false, Label::Progressor) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.fp + self.tn
    }
}

fn class_counts(labels: &[Label]) -> (usize, usize) {
    let p = labels.iter().filter(|&&l| l == Label::Progressor).count();
    (p, labels.len() - p)
}

fn check_inputs(op: &'static str, scores: &[f64], labels: &[Label]) -> Result<(), RiskError> {
    if scores.len() != labels.len() {
        return Err(RiskError::Input {
            op,
            msg: format!("{} scores but {} labels", scores.len(), labels.len()),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(RiskError::Input {
            op,
            msg: "NaN score".into(),
        });
    }
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(RiskError::SingleClass { op });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YoudenResult {
    pub tau: f64,
    /// `sensitivity + specificity - 1` at `tau`.
    pub j: f64,
}

/// Youden-optimal threshold over the distinct score values plus the
/// degenerate threshold that flags nobody. Ties go to the most specific
/// threshold (smallest for `AtOrBelow`, largest for `AtOrAbove`).
pub fn youden_threshold(scores: &[f64], labels: &[Label], rule: HighRiskRule) -> Result<YoudenResult, RiskError> {
    check_inputs("youden_threshold", scores, labels)?;
    let (pos, neg) = class_counts(labels);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // walk from the most specific threshold outwards
    match rule {
        HighRiskRule::AtOrBelow => order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b])),
        HighRiskRule::AtOrAbove => order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a])),
    }
    // J * P * N = TP * N - FP * P, compared exactly in integers
    let mut best_tau = rule.degenerate();
    let mut best_num: i64 = 0;
    let (mut tp, mut fp) = (0i64, 0i64);
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            match labels[order[i]] {
                Label::Progressor => tp += 1,
                Label::Stable => fp += 1,
            }
            i += 1;
        }
        let num = tp * neg as i64 - fp * pos as i64;
        if num > best_num {
            best_num = num;
            best_tau = v;
        }
    }
    Ok(YoudenResult {
        tau: best_tau,
        j: best_num as f64 / (pos as f64 * neg as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
}

impl ClassMetrics {
    /// Progressors are the positive class. Precision is 0 when nobody is
    /// flagged and F1 is 0 when precision + recall is 0.
    pub fn from_confusion(c: &Confusion) -> Option<Self> {
        if c.positives() == 0 || c.negatives() == 0 {
            return None;
        }
        let flagged = c.tp + c.fp;
        let precision = if flagged == 0 { 0.0 } else { c.tp as f64 / flagged as f64 };
        let recall = c.tp as f64 / c.positives() as f64;
        let specificity = c.tn as f64 / c.negatives() as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Some(Self {
            precision,
            recall,
            f1,
            balanced_accuracy: (recall + specificity) / 2.0,
        })
    }

    fn get(&self, k: usize) -> f64 {
        [self.precision, self.recall, self.f1, self.balanced_accuracy][k]
    }
}

pub fn classify_metrics(scores: &[f64], labels: &[Label], tau: f64, rule: HighRiskRule) -> Result<ClassMetrics, RiskError> {
    check_inputs("classify_metrics", scores, labels)?;
    ClassMetrics::from_confusion(&Confusion::tally(scores, labels, tau, rule)).ok_or(RiskError::SingleClass { op: "classify_metrics" })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub precision: Interval,
    pub recall: Interval,
    pub f1: Interval,
    pub balanced_accuracy: Interval,
    pub replicates: usize,
    /// Replicates drawn with a single class, whose metrics are undefined.
    pub skipped: usize,
}

/// Inverse-CDF percentile of sorted values: the smallest value whose
/// empirical CDF reaches `p`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let k = ((p * m as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[k.min(m) - 1]
}

/// Percentile bootstrap over (score, label) pairs at a fixed threshold.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[Label],
    tau: f64,
    rule: HighRiskRule,
    replicates: usize,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi, RiskError> {
    check_inputs("bootstrap_ci", scores, labels)?;
    if replicates == 0 || !(level > 0.0 && level < 1.0) {
        return Err(RiskError::Input {
            op: "bootstrap_ci",
            msg: format!("need replicates > 0 and level in (0, 1), got {replicates} and {level}"),
        });
    }
    let n = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws: [Vec<f64>; 4] = Default::default();
    let mut skipped = 0;
    let mut s = vec![0.0; n];
    let mut l = vec![Label::Stable; n];
    for _ in 0..replicates {
        for k in 0..n {
            let i = rng.random_range(0..n);
            s[k] = scores[i];
            l[k] = labels[i];
        }
        match ClassMetrics::from_confusion(&Confusion::tally(&s, &l, tau, rule)) {
            Some(m) => (0..4).for_each(|k| draws[k].push(m.get(k))),
            None => skipped += 1,
        }
    }
    if draws[0].is_empty() {
        return Err(RiskError::SingleClass { op: "bootstrap_ci" });
    }
    let tail = (1.0 - level) / 2.0;
    let mut ci = [Interval { lo: 0.0, hi: 0.0 }; 4];
    for k in 0..4 {
        draws[k].sort_by(f64::total_cmp);
        ci[k] = Interval {
            lo: percentile_sorted(&draws[k], tail),
            hi: percentile_sorted(&draws[k], 1.0 - tail),
        };
    }
    if skipped > 0 {
        log::info!("bootstrap_ci: {skipped} single-class replicate(s) skipped");
    }
    Ok(BootstrapCi {
        precision: ci[0],
        recall: ci[1],
        f1: ci[2],
        balanced_accuracy: ci[3],
        replicates,
        skipped,
    })
}

/// Orientation so that larger means riskier.
fn riskiness(score: f64, rule: HighRiskRule) -> f64 {
    match rule {
        HighRiskRule::AtOrBelow => -score,
        HighRiskRule::AtOrAbove => score,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFree {
    pub roc_auc: f64,
    pub pr_auc: f64,
}

/// ROC-AUC by the rank statistic (ties count one half) and PR-AUC as the
/// step-wise average precision, with tied scores entering together.
pub fn threshold_free(scores: &[f64], labels: &[Label], rule: HighRiskRule) -> Result<ThresholdFree, RiskError> {
    check_inputs("threshold_free", scores, labels)?;
    let (pos, neg) = class_counts(labels);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| riskiness(scores[b], rule).total_cmp(&riskiness(scores[a], rule)));

    // walk from riskiest to safest, one tie block at a time
    let mut auc_num = 0.0;
    let mut ap = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let v = riskiness(scores[order[i]], rule);
        let (mut bp, mut bn) = (0usize, 0usize);
        while i < order.len() && riskiness(scores[order[i]], rule).total_cmp(&v) == Ordering::Equal {
            match labels[order[i]] {
                Label::Progressor => bp += 1,
                Label::Stable => bn += 1,
            }
            i += 1;
        }
        // positives in this block beat every negative already passed? no:
        // they beat all negatives still below, and tie with the block's own
        auc_num += bn as f64 * tp as f64 + 0.5 * bp as f64 * bn as f64;
        tp += bp;
        fp += bn;
        if bp > 0 {
            ap += (bp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ThresholdFree {
        roc_auc: auc_num / (pos as f64 * neg as f64),
        pr_auc: ap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub direction: Direction,
    pub bootstrap_b: usize,
    pub level: f64,
    /// Fit thresholds on this fraction of subjects and report metrics on the
    /// rest; in-sample when absent.
    pub tuning_frac: Option<f64>,
    /// Treat unbounded bands as high-risk instead of excluding them.
    pub flag_infinite: bool,
    pub allow_fallback: bool,
    pub seed: u64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            direction: Direction::Decreasing,
            bootstrap_b: 2000,
            level: 0.95,
            tuning_frac: None,
            flag_infinite: false,
            allow_fallback: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRecord {
    pub subject_id: String,
    pub t0: u32,
    pub tn: u32,
    pub y_t0: f64,
    pub y_hat_tn: f64,
    pub roc_hat: f64,
    /// `None` when the band at the horizon is unbounded.
    pub rocb: Option<f64>,
    pub label: Label,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub score: String,
    pub n: usize,
    /// Threshold on the z-standardised score.
    pub tau_star: f64,
    pub youden_j: f64,
    pub z_mean: f64,
    pub z_std: f64,
    pub metrics: ClassMetrics,
    pub ci_95: BootstrapCi,
    pub threshold_free: ThresholdFree,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskOutput {
    pub records: Vec<RiskRecord>,
    pub n_no_visits: usize,
    pub n_unlabelled: usize,
    pub n_infinite_band: usize,
    pub roc_hat: ClassificationReport,
    pub rocb: ClassificationReport,
    pub recall_delta: f64,
    pub recall_delta_relative: f64,
}

pub fn labels_from_truth(truth: &TruthMap) -> BTreeMap<String, Label> {
    truth
        .iter()
        .map(|(id, t)| {
            let l = if t.is_progressor { Label::Progressor } else { Label::Stable };
            (id.clone(), l)
        })
        .collect()
}

/// Z-scores finite values; infinite values pass through unchanged.
fn zscore(values: &[f64]) -> (Vec<f64>, f64, f64) {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len().max(1) as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let sd = (finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    (values.iter().map(|v| (v - mean) / sd).collect(), mean, sd)
}

fn report(
    name: &str,
    raw: &[f64],
    labels: &[Label],
    cfg: &RiskConfig,
) -> Result<ClassificationReport, RiskError> {
    let rule = cfg.direction.rule();
    let (z, mean, sd) = zscore(raw);
    let (tune, eval): (Vec<usize>, Vec<usize>) = match cfg.tuning_frac {
        None => ((0..z.len()).collect(), (0..z.len()).collect()),
        Some(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(RiskError::Input {
                    op: "risk_pipeline",
                    msg: format!("tuning fraction must lie in (0, 1), got {f}"),
                });
            }
            let mut idx: Vec<usize> = (0..z.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7475_6e65));
            let k = floor_count(z.len() as f64 * f);
            let (a, b) = idx.split_at(k);
            (a.to_vec(), b.to_vec())
        }
    };
    let pick = |idx: &[usize]| -> (Vec<f64>, Vec<Label>) {
        (idx.iter().map(|&i| z[i]).collect(), idx.iter().map(|&i| labels[i]).collect())
    };
    let (tz, tl) = pick(&tune);
    let (ez, el) = pick(&eval);
    let youden = youden_threshold(&tz, &tl, rule)?;
    Ok(ClassificationReport {
        score: name.to_string(),
        n: ez.len(),
        tau_star: youden.tau,
        youden_j: youden.j,
        z_mean: mean,
        z_std: sd,
        metrics: classify_metrics(&ez, &el, youden.tau, rule)?,
        ci_95: bootstrap_ci(&ez, &el, youden.tau, rule, cfg.bootstrap_b, cfg.level, cfg.seed)?,
        threshold_free: threshold_free(&ez, &el, rule)?,
    })
}

/// Scores every labelled test subject at its last visit and fits a Youden
/// threshold for each of the two risk scores.
pub fn risk_pipeline<P: Predictor + ?Sized>(
    test: &Dataset,
    labels: &BTreeMap<String, Label>,
    model: &P,
    cal: &Calibration,
    cfg: &RiskConfig,
) -> Result<RiskOutput, Error> {
    let mut records = Vec::new();
    let (mut n_no_visits, mut n_unlabelled) = (0, 0);
    for s in &test.subjects {
        let Some(last) = s.last_visit() else {
            n_no_visits += 1;
            continue;
        };
        let Some(&label) = labels.get(&s.subject_id) else {
            n_unlabelled += 1;
            continue;
        };
        let tn = last.time;
        let band = band_for_subject(model, s, cal, &[tn], cfg.allow_fallback)?;
        let y_hat = band.centers[0];
        let interval = band.interval_at(tn).expect("band built at tn");
        let rocb = match rocb(s.baseline_value, interval, 0, tn, cfg.direction) {
            Ok(v) => Some(v),
            Err(RiskError::InfiniteBand) => None,
            Err(e) => return Err(e.into()),
        };
        records.push(RiskRecord {
            subject_id: s.subject_id.clone(),
            t0: 0,
            tn,
            y_t0: s.baseline_value,
            y_hat_tn: y_hat,
            roc_hat: roc_hat(s.baseline_value, y_hat, 0, tn)?,
            rocb,
            label,
            direction: cfg.direction,
        });
    }
    if n_no_visits > 0 {
        log::warn!("risk_pipeline: {n_no_visits} subject(s) without follow-up skipped");
    }
    if n_unlabelled > 0 {
        log::warn!("risk_pipeline: {n_unlabelled} subject(s) without a progression label skipped");
    }

    let all_labels: Vec<Label> = records.iter().map(|r| r.label).collect();
    let roc: Vec<f64> = records.iter().map(|r| r.roc_hat).collect();
    let roc_report = report("roc_hat", &roc, &all_labels, cfg)?;

    let n_infinite = records.iter().filter(|r| r.rocb.is_none()).count();
    let worst = cfg.direction.rule().degenerate();
    let (b_scores, b_labels): (Vec<f64>, Vec<Label>) = records
        .iter()
        .filter_map(|r| match (r.rocb, cfg.flag_infinite) {
            (Some(v), _) => Some((v, r.label)),
            // degenerate() flags nobody, so its negation flags everybody
            (None, true) => Some((-worst, r.label)),
            (None, false) => None,
        })
        .unzip();
    if n_infinite > 0 {
        log::warn!(
            "risk_pipeline: {n_infinite} subject(s) with unbounded bands {}",
            if cfg.flag_infinite { "flagged high-risk" } else { "excluded from the bound score" }
        );
    }
    let rocb_report = report("rocb", &b_scores, &b_labels, cfg)?;

    let recall_delta = rocb_report.metrics.recall - roc_report.metrics.recall;
    let recall_delta_relative = if roc_report.metrics.recall > 0.0 {
        recall_delta / roc_report.metrics.recall
    } else {
        f64::NAN
    };
    Ok(RiskOutput {
        records,
        n_no_visits,
        n_unlabelled,
        n_infinite_band: n_infinite,
        roc_hat: roc_report,
        rocb: rocb_report,
        recall_delta,
        recall_delta_relative,
    })
}
