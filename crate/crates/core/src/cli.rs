//! The `conftraj` command line.
//!
//! Every subcommand reads one JSON [`RunConfig`] (all keys optional), applies
//! flag overrides, writes `resolved_config.json` into the output directory and
//! then its own artifacts. Cohorts come from `data.path` when set and from
//! the synthetic generator otherwise.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, mondrian_calibrate, score_dataset, CalibrationResult, Radius, DEFAULT_T_MAX};
use crate::data::{load_csv, sniff_schema, standardize, write_csv, Dataset, SplitIndices, StandardizationStats};
use crate::error::Error;
use crate::evaluation::{
    calibrate_model, prepare_split, run_protocol, stratified_compare, sweep_calibration_fraction, write_protocol_csv,
    write_stratified_csv, write_sweep_csv, ProtocolConfig, DEFAULT_SWEEP_FRACS,
};
use crate::predictors::{load_json, save_json, Model, PredictorConfig, PredictorKind};
use crate::risk::{labels_from_truth, risk_pipeline, Direction, RiskConfig, RiskOutput};
use crate::synth::{generate, read_truth_csv, write_truth_csv, SynthConfig, TruthMap};

pub const CONFIG_SCHEMA: &str = "conftraj.config/1";
pub const REPORT_SCHEMA: &str = "conftraj.report/1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format cohort CSV; synthetic when absent.
    pub path: Option<PathBuf>,
    /// Ground-truth CSV (`subject_id,is_progressor,true_slope`) for `risk`.
    pub truth: Option<PathBuf>,
    /// Categorical columns; when empty, non-numeric extra columns are used.
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConformalConfig {
    pub alpha: f64,
    pub group_by: Option<String>,
    pub allow_fallback: bool,
    pub t_max: u32,
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            group_by: None,
            allow_fallback: true,
            t_max: DEFAULT_T_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub n_splits: usize,
    pub test_frac: f64,
    pub calib_frac: f64,
    pub mondrian: bool,
    pub sweep_fracs: Vec<f64>,
    pub jobs: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            n_splits: 10,
            test_frac: 0.10,
            calib_frac: 0.20,
            mondrian: false,
            sweep_fracs: DEFAULT_SWEEP_FRACS.to_vec(),
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskSection {
    pub direction: Direction,
    #[serde(alias = "bootstrap_B")]
    pub bootstrap_b: usize,
    pub level: f64,
    pub tuning_frac: Option<f64>,
    pub flag_infinite: bool,
}

impl Default for RiskSection {
    fn default() -> Self {
        let r = RiskConfig::default();
        Self {
            direction: r.direction,
            bootstrap_b: r.bootstrap_b,
            level: r.level,
            tuning_frac: r.tuning_frac,
            flag_infinite: r.flag_infinite,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: Option<String>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub predictor: PredictorConfig,
    pub conformal: ConformalConfig,
    pub evaluation: EvaluationConfig,
    pub risk: RiskSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema: None,
            seed: 0,
            out_dir: PathBuf::from("out"),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            predictor: PredictorConfig::default(),
            conformal: ConformalConfig::default(),
            evaluation: EvaluationConfig::default(),
            risk: RiskSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Cli(format!("config `{}`: {e}", path.display())))?;
        if let Some(s) = &cfg.schema {
            if s != CONFIG_SCHEMA {
                return Err(Error::Cli(format!("unsupported config schema `{s}`, expected `{CONFIG_SCHEMA}`")));
            }
        }
        Ok(cfg)
    }

    fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            alpha: self.conformal.alpha,
            n_splits: self.evaluation.n_splits,
            test_frac: self.evaluation.test_frac,
            calib_frac: self.evaluation.calib_frac,
            group_by: self.conformal.group_by.clone(),
            mondrian: self.evaluation.mondrian,
            allow_fallback: self.conformal.allow_fallback,
            jobs: self.evaluation.jobs,
        }
    }

    fn risk_config(&self) -> RiskConfig {
        RiskConfig {
            direction: self.risk.direction,
            bootstrap_b: self.risk.bootstrap_b,
            level: self.risk.level,
            tuning_frac: self.risk.tuning_frac,
            flag_infinite: self.risk.flag_infinite,
            allow_fallback: self.conformal.allow_fallback,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "conftraj", version, about = "Conformal prediction bands for randomly-timed trajectories")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for `evaluate` and `sweep` (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Cohort CSV instead of a synthetic cohort.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Ground-truth CSV for `risk`.
    #[arg(long, global = true)]
    pub truth: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub predictor: Option<PredictorKind>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long = "group-by", global = true)]
    pub group_by: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort and its ground truth.
    Generate,
    /// Fit a predictor on the training part of one split.
    Fit,
    /// Calibrate a fitted model on the calibration part of the same split.
    Calibrate {
        /// Model written by `fit`; defaults to `<out>/model.json`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Multi-split coverage and width report.
    Evaluate,
    /// Calibration-fraction sweep.
    Sweep,
    /// Population versus group-conditional coverage per group.
    Stratify,
    /// Rate-of-change risk stratification.
    Risk {
        #[arg(long, value_enum)]
        direction: Option<Direction>,
        /// Bootstrap replicates for confidence intervals.
        #[arg(long)]
        bootstrap: Option<usize>,
    },
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

pub fn resolve(global: &GlobalArgs) -> Result<RunConfig, Error> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(o) = &global.out {
        cfg.out_dir = o.clone();
    }
    if let Some(j) = global.jobs {
        cfg.evaluation.jobs = j;
    }
    if let Some(d) = &global.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(t) = &global.truth {
        cfg.data.truth = Some(t.clone());
    }
    if let Some(k) = global.predictor {
        cfg.predictor.kind = k;
    }
    if let Some(a) = global.alpha {
        cfg.conformal.alpha = a;
    }
    if let Some(g) = &global.group_by {
        cfg.conformal.group_by = Some(g.clone());
    }
    cfg.schema = Some(CONFIG_SCHEMA.to_string());
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = resolve(&cli.global)?;
    if let Command::Risk { direction, bootstrap } = &cli.command {
        if let Some(d) = direction {
            cfg.risk.direction = *d;
        }
        if let Some(b) = bootstrap {
            cfg.risk.bootstrap_b = *b;
        }
    }
    crate::conformal::check_alpha(cfg.conformal.alpha)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg, &cfg.out_dir.join("resolved_config.json"))?;
    match cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Fit => cmd_fit(&cfg),
        Command::Calibrate { model } => {
            let path = model.unwrap_or_else(|| cfg.out_dir.join("model.json"));
            cmd_calibrate(&cfg, &path)
        }
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::Stratify => cmd_stratify(&cfg),
        Command::Risk { .. } => cmd_risk(&cfg),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), Error> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Report<'a, T> {
    schema: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn write_report<T: Serialize>(body: &T, path: &Path) -> Result<(), Error> {
    write_json(&Report { schema: REPORT_SCHEMA, body }, path)
}

fn create(path: &Path) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Cohort plus optional ground truth.
pub fn load_cohort(cfg: &RunConfig) -> Result<(Dataset, Option<TruthMap>), Error> {
    match &cfg.data.path {
        Some(path) => {
            let schema = sniff_schema(path, &cfg.data.groups)?;
            let (ds, report) = load_csv(path, &schema)?;
            log::info!(
                "loaded {} rows, {} subjects ({} without follow-up)",
                report.rows,
                report.subjects,
                report.empty_trajectories
            );
            let truth = match &cfg.data.truth {
                Some(t) => Some(read_truth_csv(File::open(t)?)?),
                None => None,
            };
            Ok((ds, truth))
        }
        None => {
            let (ds, truth) = generate(&cfg.synth)?;
            Ok((ds, Some(truth)))
        }
    }
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<(), Error> {
    let (ds, truth) = generate(&cfg.synth)?;
    write_csv(&ds, create(&cfg.out_dir.join("cohort.csv"))?)?;
    write_truth_csv(&truth, create(&cfg.out_dir.join("truth.csv"))?)?;
    log::info!("generated {} subjects", ds.len());
    Ok(())
}

/// Fitted model with everything `calibrate` needs to reproduce the split.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitArtifact {
    pub model: Model,
    pub standardization: StandardizationStats,
    pub split: SplitIndices,
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<(), Error> {
    let (ds, _) = load_cohort(cfg)?;
    let split = crate::data::split(ds.len(), cfg.evaluation.test_frac, cfg.evaluation.calib_frac, cfg.seed)?;
    let (train, standardization) = standardize(&ds.subset(&split.train), None)?;
    let model = Model::fit(&train, &cfg.predictor, cfg.seed)?;
    let artifact = FitArtifact {
        model,
        standardization,
        split,
    };
    save_json(&artifact, cfg.out_dir.join("model.json"))?;
    Ok(())
}

/// Calibration artifact: the population result plus optional per-group results.
#[derive(Debug, Serialize)]
pub struct CalibrationArtifact {
    pub alpha: f64,
    pub n: usize,
    pub rank: usize,
    pub radius: Radius,
    pub grouping_column: Option<String>,
    pub per_group: BTreeMap<String, CalibrationEntry>,
}

#[derive(Debug, Serialize)]
pub struct CalibrationEntry {
    pub n: usize,
    pub rank: usize,
    pub radius: Radius,
}

impl From<&CalibrationResult> for CalibrationEntry {
    fn from(c: &CalibrationResult) -> Self {
        Self {
            n: c.n,
            rank: c.rank,
            radius: c.radius,
        }
    }
}

pub fn cmd_calibrate(cfg: &RunConfig, model_path: &Path) -> Result<(), Error> {
    let artifact: FitArtifact = load_json(model_path)?;
    let (ds, _) = load_cohort(cfg)?;
    if artifact.split.train.iter().chain(&artifact.split.calib).any(|&i| i >= ds.len()) {
        return Err(Error::Cli("model split does not match the cohort".into()));
    }
    let (calib, _) = standardize(&ds.subset(&artifact.split.calib), Some(artifact.standardization))?;
    let scores = score_dataset(&artifact.model, &calib)?;
    let alpha = cfg.conformal.alpha;
    let pop = calibrate(&scores, alpha)?;
    let per_group = match &cfg.conformal.group_by {
        Some(col) => mondrian_calibrate(&calib, &scores, col, alpha)?
            .per_group
            .iter()
            .map(|(k, c)| (k.clone(), c.into()))
            .collect(),
        None => BTreeMap::new(),
    };
    let out = CalibrationArtifact {
        alpha,
        n: pop.n,
        rank: pop.rank,
        radius: pop.radius,
        grouping_column: cfg.conformal.group_by.clone(),
        per_group,
    };
    write_report(&out, &cfg.out_dir.join("calibration.json"))
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), Error> {
    let (ds, _) = load_cohort(cfg)?;
    let report = run_protocol(&ds, &cfg.predictor, &cfg.protocol(), cfg.seed)?;
    write_report(&report, &cfg.out_dir.join("report.json"))?;
    write_protocol_csv(&report, create(&cfg.out_dir.join("report.csv"))?)?;
    log::info!(
        "conformal coverage {:.4} (target {:.4}), baseline coverage {:.4}",
        report.conformal.coverage.mean,
        report.target_coverage,
        report.baseline.coverage.mean
    );
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<(), Error> {
    let (ds, _) = load_cohort(cfg)?;
    let report = sweep_calibration_fraction(&ds, &cfg.predictor, &cfg.protocol(), &cfg.evaluation.sweep_fracs, cfg.seed)?;
    write_report(&report, &cfg.out_dir.join("sweep.json"))?;
    write_sweep_csv(&report, create(&cfg.out_dir.join("sweep.csv"))?)
}

pub fn cmd_stratify(cfg: &RunConfig) -> Result<(), Error> {
    let (ds, _) = load_cohort(cfg)?;
    let column = cfg
        .conformal
        .group_by
        .clone()
        .or_else(|| ds.group_columns.first().cloned())
        .ok_or_else(|| Error::Cli("stratify needs --group-by or a cohort with group columns".into()))?;
    let report = stratified_compare(&ds, &cfg.predictor, &cfg.protocol(), &column, cfg.seed)?;
    write_report(&report, &cfg.out_dir.join("stratified.json"))?;
    write_stratified_csv(&report, create(&cfg.out_dir.join("stratified.csv"))?)
}

pub fn cmd_risk(cfg: &RunConfig) -> Result<(), Error> {
    let (ds, truth) = load_cohort(cfg)?;
    let truth = truth.ok_or_else(|| Error::Cli("risk needs progression labels: set data.truth or --truth".into()))?;
    let data = prepare_split(&ds, cfg.evaluation.test_frac, cfg.evaluation.calib_frac, cfg.seed)?;
    let model = Model::fit(&data.train, &cfg.predictor, cfg.seed)?;
    let cal = calibrate_model(&model, &data.calib, cfg.conformal.alpha, cfg.conformal.group_by.as_deref())?;
    let out = risk_pipeline(&data.test, &labels_from_truth(&truth), &model, &cal, &cfg.risk_config())?;
    write_report(&out, &cfg.out_dir.join("risk.json"))?;
    write_risk_tables(&out, &cfg.out_dir)?;
    log::info!(
        "recall {:.3} (predicted rate) vs {:.3} (bound), {} unbounded band(s)",
        out.roc_hat.metrics.recall,
        out.rocb.metrics.recall,
        out.n_infinite_band
    );
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    crate::error::DataError::from(e).into()
}

pub fn write_risk_tables(out: &RiskOutput, dir: &Path) -> Result<(), Error> {
    let mut w = csv::Writer::from_writer(create(&dir.join("risk_table.csv"))?);
    w.write_record([
        "method", "n", "tau_star", "precision", "precision_lo", "precision_hi", "recall", "recall_lo", "recall_hi",
        "f1", "f1_lo", "f1_hi", "balanced_accuracy", "balanced_accuracy_lo", "balanced_accuracy_hi",
    ])
    .map_err(csv_err)?;
    for r in [&out.roc_hat, &out.rocb] {
        let m = &r.metrics;
        let c = &r.ci_95;
        w.write_record(
            [
                r.score.clone(),
                r.n.to_string(),
                r.tau_star.to_string(),
            ]
            .into_iter()
            .chain(
                [
                    (m.precision, c.precision),
                    (m.recall, c.recall),
                    (m.f1, c.f1),
                    (m.balanced_accuracy, c.balanced_accuracy),
                ]
                .into_iter()
                .flat_map(|(v, i)| [v.to_string(), i.lo.to_string(), i.hi.to_string()]),
            ),
        )
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&dir.join("risk_threshold_free.csv"))?);
    w.write_record(["method", "roc_auc", "pr_auc"]).map_err(csv_err)?;
    for r in [&out.roc_hat, &out.rocb] {
        w.write_record([
            r.score.clone(),
            r.threshold_free.roc_auc.to_string(),
            r.threshold_free.pr_auc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_writer(create(&dir.join("risk_records.csv"))?);
    w.write_record(["subject_id", "t0", "tn", "y_t0", "y_hat_tn", "roc_hat", "rocb", "label"])
        .map_err(csv_err)?;
    for r in &out.records {
        w.write_record([
            r.subject_id.clone(),
            r.t0.to_string(),
            r.tn.to_string(),
            r.y_t0.to_string(),
            r.y_hat_tn.to_string(),
            r.roc_hat.to_string(),
            r.rocb.map_or_else(|| "inf".to_string(), |v| v.to_string()),
            match r.label {
                crate::risk::Label::Stable => "stable".into(),
                crate::risk::Label::Progressor => "progressor".into(),
            },
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
