//! Coverage and width reports over repeated train/calibration/test splits.
//!
//! A test trajectory is covered when every observed visit lies inside the
//! closed band. Widths are `2 * radius_t` at the observed visit months.
//! Unbounded bands count as covering and are left out of every width mean.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;

use crate::conformal::{
    baseline_band, band_for_subject, calibrate, mondrian_calibrate, score_dataset, time_grid, Calibration,
    CalibrationResult, PredictionBand, Radius,
};
use crate::data::{split, standardize, Dataset};
use crate::error::{Error, EvalError};
use crate::predictors::{Model, Predictor, PredictorConfig, PredictorKind};
use crate::risk::percentile_sorted;

/// Coverage and width for one slice of the test set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStat {
    pub coverage: f64,
    /// `None` when every band in the slice is unbounded.
    pub width: Option<f64>,
    pub n: usize,
    pub n_infinite: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_coverage: f64,
    pub mean_width: Option<f64>,
    pub n_test: usize,
    pub n_covered: usize,
    pub n_infinite_bands: usize,
    /// Number of (subject, visit) pairs behind `mean_width`.
    pub n_width_points: usize,
    /// Year bucket `floor((t - 1) / 12)` to mean width.
    pub per_time_width: BTreeMap<u32, f64>,
    pub per_group: Option<BTreeMap<String, GroupStat>>,
}

#[derive(Default)]
struct Tally {
    n: usize,
    covered: usize,
    infinite: usize,
    width_sum: f64,
    width_points: usize,
}

impl Tally {
    fn stat(&self) -> GroupStat {
        GroupStat {
            coverage: if self.n == 0 { 0.0 } else { self.covered as f64 / self.n as f64 },
            width: (self.width_points > 0).then(|| self.width_sum / self.width_points as f64),
            n: self.n,
            n_infinite: self.infinite,
        }
    }
}

fn index_bands(bands: &[PredictionBand]) -> HashMap<&str, &PredictionBand> {
    bands.iter().map(|b| (b.subject_id.as_str(), b)).collect()
}

/// Trajectory-level coverage and mean width over test subjects with at
/// least one visit, optionally broken down by a grouping column.
pub fn coverage_and_width(
    bands: &[PredictionBand],
    test: &Dataset,
    group_by: Option<&str>,
) -> Result<EvalReport, EvalError> {
    let by_id = index_bands(bands);
    let mut total = Tally::default();
    let mut groups: BTreeMap<String, Tally> = BTreeMap::new();
    for s in test.scorable() {
        let band = by_id
            .get(s.subject_id.as_str())
            .ok_or_else(|| EvalError::MissingBand(s.subject_id.clone()))?;
        let mut covered = true;
        let mut widths = Vec::with_capacity(s.visits.len());
        for v in &s.visits {
            let (lo, hi) = band.interval_at(v.time).ok_or_else(|| EvalError::Alignment {
                subject: s.subject_id.clone(),
                time: v.time,
            })?;
            covered &= lo <= v.value && v.value <= hi;
            if let Some(Some(r)) = band.radius_at(v.time) {
                widths.push(2.0 * r);
            }
        }
        let add = |t: &mut Tally| {
            t.n += 1;
            t.covered += usize::from(covered);
            t.infinite += usize::from(!band.is_finite());
            t.width_sum += widths.iter().sum::<f64>();
            t.width_points += widths.len();
        };
        add(&mut total);
        if let Some(col) = group_by {
            let label = s.group(col).unwrap_or("").to_string();
            add(groups.entry(label).or_default());
        }
    }
    if total.infinite > 0 {
        log::warn!(
            "coverage_and_width: {} unbounded band(s) excluded from width",
            total.infinite
        );
    }
    let overall = total.stat();
    Ok(EvalReport {
        mean_coverage: overall.coverage,
        mean_width: overall.width,
        n_test: total.n,
        n_covered: total.covered,
        n_infinite_bands: total.infinite,
        n_width_points: total.width_points,
        per_time_width: width_over_time(bands, test, 12)?,
        per_group: group_by.map(|_| groups.iter().map(|(g, t)| (g.clone(), t.stat())).collect()),
    })
}

fn bucket_of(t: u32, bucket_months: u32) -> u32 {
    t.saturating_sub(1) / bucket_months
}

fn bucket_means(sums: BTreeMap<u32, (f64, usize)>) -> BTreeMap<u32, f64> {
    sums.into_iter().map(|(b, (s, n))| (b, s / n as f64)).collect()
}

/// Mean width per `bucket_months` bucket at the observed visit months.
pub fn width_over_time(
    bands: &[PredictionBand],
    test: &Dataset,
    bucket_months: u32,
) -> Result<BTreeMap<u32, f64>, EvalError> {
    if bucket_months == 0 {
        return Err(EvalError::Config("bucket width must be positive".into()));
    }
    let by_id = index_bands(bands);
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for s in test.scorable() {
        let band = by_id
            .get(s.subject_id.as_str())
            .ok_or_else(|| EvalError::MissingBand(s.subject_id.clone()))?;
        for v in &s.visits {
            let r = band.radius_at(v.time).ok_or_else(|| EvalError::Alignment {
                subject: s.subject_id.clone(),
                time: v.time,
            })?;
            if let Some(r) = r {
                let e = sums.entry(bucket_of(v.time, bucket_months)).or_default();
                e.0 += 2.0 * r;
                e.1 += 1;
            }
        }
    }
    Ok(bucket_means(sums))
}

/// Mean width per bucket over every month each band was built on.
pub fn width_over_band_times(bands: &[PredictionBand], bucket_months: u32) -> Result<BTreeMap<u32, f64>, EvalError> {
    if bucket_months == 0 {
        return Err(EvalError::Config("bucket width must be positive".into()));
    }
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for b in bands {
        if let Some(radii) = &b.radii {
            for (&t, &r) in b.times.iter().zip(radii) {
                let e = sums.entry(bucket_of(t, bucket_months)).or_default();
                e.0 += 2.0 * r;
                e.1 += 1;
            }
        }
    }
    Ok(bucket_means(sums))
}

/// Conformal bands for every test subject on the month grid `1..=t_max`.
pub fn grid_bands<P: Predictor + ?Sized>(
    model: &P,
    test: &Dataset,
    cal: &Calibration,
    t_max: u32,
    allow_fallback: bool,
) -> Result<Vec<PredictionBand>, Error> {
    let grid = time_grid(t_max);
    test.scorable()
        .map(|s| Ok(band_for_subject(model, s, cal, &grid, allow_fallback)?))
        .collect()
}

/// Conformal bands at each test subject's visit months.
pub fn visit_bands<P: Predictor + ?Sized>(
    model: &P,
    test: &Dataset,
    cal: &Calibration,
    allow_fallback: bool,
) -> Result<Vec<PredictionBand>, Error> {
    test.scorable()
        .map(|s| Ok(band_for_subject(model, s, cal, &s.visit_times(), allow_fallback)?))
        .collect()
}

/// Gaussian `mean ± z * std` bands at each test subject's visit months.
pub fn baseline_bands<P: Predictor + ?Sized>(model: &P, test: &Dataset, alpha: f64) -> Result<Vec<PredictionBand>, Error> {
    test.scorable()
        .map(|s| Ok(baseline_band(model, &s.subject_id, &s.input(), &s.visit_times(), alpha)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub alpha: f64,
    pub n_splits: usize,
    pub test_frac: f64,
    pub calib_frac: f64,
    /// Column for per-group reporting.
    pub group_by: Option<String>,
    /// Calibrate within the categories of `group_by` instead of pooling.
    pub mondrian: bool,
    pub allow_fallback: bool,
    /// Worker threads for splits; 0 uses all cores.
    pub jobs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            n_splits: 10,
            test_frac: 0.10,
            calib_frac: 0.20,
            group_by: None,
            mondrian: false,
            allow_fallback: true,
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationSummary {
    pub n: usize,
    pub rank: usize,
    pub radius: Radius,
}

impl From<&CalibrationResult> for CalibrationSummary {
    fn from(c: &CalibrationResult) -> Self {
        Self {
            n: c.n,
            rank: c.rank,
            radius: c.radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub index: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_calib: usize,
    pub n_test: usize,
    pub calibration: CalibrationSummary,
    pub per_group_calibration: Option<BTreeMap<String, CalibrationSummary>>,
    pub conformal: EvalReport,
    pub baseline: EvalReport,
}

/// Distribution of one metric across splits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Standard error of the mean.
    pub se: f64,
    pub p5: f64,
    pub p95: f64,
    pub n: usize,
}

impl Summary {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            mean,
            se,
            p5: percentile_sorted(&sorted, 0.05),
            p95: percentile_sorted(&sorted, 0.95),
            n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub coverage: Summary,
    /// Over splits with at least one finite band.
    pub width: Option<Summary>,
    /// 95th percentile of `|coverage - (1 - alpha)|` across splits.
    pub coverage_error_p95: f64,
}

impl MetricSummary {
    fn of(reports: &[&EvalReport], target: f64) -> Self {
        let cov: Vec<f64> = reports.iter().map(|r| r.mean_coverage).collect();
        let width: Vec<f64> = reports.iter().filter_map(|r| r.mean_width).collect();
        let mut err: Vec<f64> = cov.iter().map(|c| (c - target).abs()).collect();
        err.sort_by(f64::total_cmp);
        Self {
            coverage: Summary::of(&cov).expect("at least one split"),
            width: Summary::of(&width),
            coverage_error_p95: percentile_sorted(&err, 0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MultiSplitReport {
    pub predictor: PredictorKind,
    pub alpha: f64,
    pub target_coverage: f64,
    pub seed: u64,
    pub splits: Vec<SplitReport>,
    pub conformal: MetricSummary,
    pub baseline: MetricSummary,
}

/// Seed of split `index`, decorrelated from neighbouring indices.
pub fn split_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standardized train/calibration/test subsets for one split.
pub struct SplitData {
    pub train: Dataset,
    pub calib: Dataset,
    pub test: Dataset,
}

pub fn prepare_split(ds: &Dataset, test_frac: f64, calib_frac: f64, seed: u64) -> Result<SplitData, Error> {
    let idx = split(ds.len(), test_frac, calib_frac, seed)?;
    let (train, stats) = standardize(&ds.subset(&idx.train), None)?;
    let (calib, _) = standardize(&ds.subset(&idx.calib), Some(stats))?;
    let (test, _) = standardize(&ds.subset(&idx.test), Some(stats))?;
    Ok(SplitData { train, calib, test })
}

/// Population or Mondrian calibration of `model` on `calib`.
pub fn calibrate_model<P: Predictor + ?Sized>(
    model: &P,
    calib: &Dataset,
    alpha: f64,
    mondrian_column: Option<&str>,
) -> Result<Calibration, Error> {
    let scores = score_dataset(model, calib)?;
    Ok(match mondrian_column {
        Some(col) => Calibration::Grouped(mondrian_calibrate(calib, &scores, col, alpha)?),
        None => Calibration::Population(calibrate(&scores, alpha)?),
    })
}

fn run_split(
    ds: &Dataset,
    pcfg: &PredictorConfig,
    cfg: &ProtocolConfig,
    index: usize,
    seed: u64,
) -> Result<SplitReport, Error> {
    let data = prepare_split(ds, cfg.test_frac, cfg.calib_frac, seed)?;
    let model = Model::fit(&data.train, pcfg, seed)?;
    let mondrian = if cfg.mondrian {
        Some(
            cfg.group_by
                .as_deref()
                .ok_or_else(|| EvalError::Config("Mondrian calibration needs a grouping column".into()))?,
        )
    } else {
        None
    };
    let cal = calibrate_model(&model, &data.calib, cfg.alpha, mondrian)?;
    let group_by = cfg.group_by.as_deref();
    let conformal = coverage_and_width(&visit_bands(&model, &data.test, &cal, cfg.allow_fallback)?, &data.test, group_by)?;
    let baseline = coverage_and_width(&baseline_bands(&model, &data.test, cfg.alpha)?, &data.test, group_by)?;
    let (calibration, per_group_calibration) = match &cal {
        Calibration::Population(c) => (c.into(), None),
        Calibration::Grouped(g) => (
            (&g.fallback).into(),
            Some(g.per_group.iter().map(|(k, c)| (k.clone(), c.into())).collect()),
        ),
    };
    Ok(SplitReport {
        index,
        seed,
        n_train: data.train.len(),
        n_calib: data.calib.len(),
        n_test: data.test.len(),
        calibration,
        per_group_calibration,
        conformal,
        baseline,
    })
}

fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, Error> {
    if jobs == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EvalError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Repeats split, standardize, fit, calibrate and evaluate `n_splits` times
/// and aggregates the conformal and Gaussian-baseline reports.
pub fn run_protocol(
    ds: &Dataset,
    pcfg: &PredictorConfig,
    cfg: &ProtocolConfig,
    seed: u64,
) -> Result<MultiSplitReport, Error> {
    crate::conformal::check_alpha(cfg.alpha)?;
    if cfg.n_splits == 0 {
        return Err(EvalError::Config("n_splits must be positive".into()).into());
    }
    let results: Vec<Result<SplitReport, Error>> = with_pool(cfg.jobs, || {
        (0..cfg.n_splits)
            .into_par_iter()
            .map(|i| run_split(ds, pcfg, cfg, i, split_seed(seed, i)))
            .collect()
    })?;
    let mut splits = Vec::with_capacity(results.len());
    for (index, r) in results.into_iter().enumerate() {
        splits.push(r.map_err(|e| EvalError::Split {
            index,
            source: Box::new(e),
        })?);
    }
    let target = 1.0 - cfg.alpha;
    let conformal = MetricSummary::of(&splits.iter().map(|s| &s.conformal).collect::<Vec<_>>(), target);
    let baseline = MetricSummary::of(&splits.iter().map(|s| &s.baseline).collect::<Vec<_>>(), target);
    Ok(MultiSplitReport {
        predictor: pcfg.kind,
        alpha: cfg.alpha,
        target_coverage: target,
        seed,
        splits,
        conformal,
        baseline,
    })
}

pub const DEFAULT_SWEEP_FRACS: [f64; 7] = [0.01, 0.02, 0.05, 0.10, 0.15, 0.20, 0.30];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub calib_frac: f64,
    pub coverage: f64,
    pub width: Option<f64>,
    pub mean_n_calib: f64,
    pub n_infinite_bands: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Whether coverage never drops as the fraction grows; stochastic, so
    /// reported rather than enforced.
    pub coverage_non_decreasing: bool,
}

/// Runs the protocol once per calibration fraction. The test subjects of each
/// split depend only on the seed, so every fraction sees the same test sets.
pub fn sweep_calibration_fraction(
    ds: &Dataset,
    pcfg: &PredictorConfig,
    cfg: &ProtocolConfig,
    fracs: &[f64],
    seed: u64,
) -> Result<SweepReport, Error> {
    let mut rows = Vec::with_capacity(fracs.len());
    for &f in fracs {
        let r = run_protocol(ds, pcfg, &ProtocolConfig { calib_frac: f, ..cfg.clone() }, seed)?;
        rows.push(SweepRow {
            calib_frac: f,
            coverage: r.conformal.coverage.mean,
            width: r.conformal.width.map(|w| w.mean),
            mean_n_calib: r.splits.iter().map(|s| s.n_calib as f64).sum::<f64>() / r.splits.len() as f64,
            n_infinite_bands: r.splits.iter().map(|s| s.conformal.n_infinite_bands).sum(),
        });
    }
    let coverage_non_decreasing = rows.windows(2).all(|w| w[1].coverage >= w[0].coverage);
    Ok(SweepReport {
        rows,
        coverage_non_decreasing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratifiedRow {
    pub group: String,
    pub n: usize,
    pub population: GroupStat,
    pub group_conditional: GroupStat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratifiedReport {
    pub grouping_column: String,
    pub alpha: f64,
    pub rows: Vec<StratifiedRow>,
}

/// Population and Mondrian calibration from one fitted model, evaluated on
/// the same test subjects group by group.
pub fn stratified_compare(
    ds: &Dataset,
    pcfg: &PredictorConfig,
    cfg: &ProtocolConfig,
    grouping_column: &str,
    seed: u64,
) -> Result<StratifiedReport, Error> {
    let data = prepare_split(ds, cfg.test_frac, cfg.calib_frac, seed)?;
    let model = Model::fit(&data.train, pcfg, seed)?;
    stratified_from_model(&model, &data.calib, &data.test, cfg.alpha, grouping_column, cfg.allow_fallback)
}

pub fn stratified_from_model<P: Predictor + ?Sized>(
    model: &P,
    calib: &Dataset,
    test: &Dataset,
    alpha: f64,
    grouping_column: &str,
    allow_fallback: bool,
) -> Result<StratifiedReport, Error> {
    let pop = calibrate_model(model, calib, alpha, None)?;
    let grp = calibrate_model(model, calib, alpha, Some(grouping_column))?;
    let eval = |cal: &Calibration| -> Result<BTreeMap<String, GroupStat>, Error> {
        let bands = visit_bands(model, test, cal, allow_fallback)?;
        Ok(coverage_and_width(&bands, test, Some(grouping_column))?
            .per_group
            .unwrap_or_default())
    };
    let p = eval(&pop)?;
    let mut g = eval(&grp)?;
    let rows = p
        .into_iter()
        .map(|(group, population)| {
            let group_conditional = g.remove(&group).expect("same test subjects");
            StratifiedRow {
                n: population.n,
                group,
                population,
                group_conditional,
            }
        })
        .collect();
    Ok(StratifiedReport {
        grouping_column: grouping_column.to_string(),
        alpha,
        rows,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Long-format CSV: one row per split, band type, group and metric, followed
/// by the cross-split aggregates under split `mean` and `p95`.
pub fn write_protocol_csv<W: std::io::Write>(r: &MultiSplitReport, w: W) -> Result<(), Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["split", "bands", "group", "metric", "value"])
        .map_err(crate::error::DataError::from)?;
    let mut rows: Vec<[String; 5]> = Vec::new();
    for s in &r.splits {
        for (name, rep) in [("conformal", &s.conformal), ("baseline", &s.baseline)] {
            let split = s.index.to_string();
            let mut push = |group: &str, metric: &str, value: String| {
                rows.push([split.clone(), name.into(), group.into(), metric.into(), value]);
            };
            push("all", "coverage", rep.mean_coverage.to_string());
            push("all", "width", opt(rep.mean_width));
            push("all", "n_test", rep.n_test.to_string());
            push("all", "n_infinite_bands", rep.n_infinite_bands.to_string());
            for (b, wv) in &rep.per_time_width {
                push("all", &format!("width_year_{b}"), wv.to_string());
            }
            for (g, st) in rep.per_group.iter().flatten() {
                push(g, "coverage", st.coverage.to_string());
                push(g, "width", opt(st.width));
                push(g, "n_test", st.n.to_string());
            }
        }
    }
    for (name, m) in [("conformal", &r.conformal), ("baseline", &r.baseline)] {
        for (stat, cov, width) in [
            ("mean", m.coverage.mean, m.width.map(|w| w.mean)),
            ("se", m.coverage.se, m.width.map(|w| w.se)),
            ("p5", m.coverage.p5, m.width.map(|w| w.p5)),
            ("p95", m.coverage.p95, m.width.map(|w| w.p95)),
        ] {
            rows.push([stat.into(), name.into(), "all".into(), "coverage".into(), cov.to_string()]);
            rows.push([stat.into(), name.into(), "all".into(), "width".into(), opt(width)]);
        }
        rows.push([
            "p95".into(),
            name.into(),
            "all".into(),
            "coverage_error".into(),
            m.coverage_error_p95.to_string(),
        ]);
    }
    for row in rows {
        out.write_record(&row).map_err(crate::error::DataError::from)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: std::io::Write>(r: &SweepReport, w: W) -> Result<(), Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["calib_frac", "coverage", "width", "mean_n_calib", "n_infinite_bands"])
        .map_err(crate::error::DataError::from)?;
    for row in &r.rows {
        out.write_record([
            row.calib_frac.to_string(),
            row.coverage.to_string(),
            opt(row.width),
            row.mean_n_calib.to_string(),
            row.n_infinite_bands.to_string(),
        ])
        .map_err(crate::error::DataError::from)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_stratified_csv<W: std::io::Write>(r: &StratifiedReport, w: W) -> Result<(), Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "group",
        "n",
        "population_coverage",
        "population_width",
        "group_conditional_coverage",
        "group_conditional_width",
    ])
    .map_err(crate::error::DataError::from)?;
    for row in &r.rows {
        out.write_record([
            row.group.clone(),
            row.n.to_string(),
            row.population.coverage.to_string(),
            opt(row.population.width),
            row.group_conditional.coverage.to_string(),
            opt(row.group_conditional.width),
        ])
        .map_err(crate::error::DataError::from)?;
    }
    out.flush()?;
    Ok(())
}
