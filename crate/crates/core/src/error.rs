//! Error types, one enum per module plus a crate-level wrapper.
//!
//! Every message starts with the `module.operation` that raised it so CLI
//! users can tell which precondition failed.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("data.load_csv: missing column `{0}`")]
    MissingColumn(String),

    #[error("data.load_csv: row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("data.load_csv: row {row}: time `{value}` is not a non-negative whole number of months")]
    BadTime { row: usize, value: String },

    #[error("data.load_csv: duplicate visit for subject `{subject}` at month {time}")]
    DuplicateVisit { subject: String, time: u32 },

    #[error("data.load_csv: subject `{0}` has no baseline row at month 0")]
    MissingBaseline(String),

    #[error("data: subject `{subject}` has {got} features, expected {expected}")]
    FeatureLength {
        subject: String,
        got: usize,
        expected: usize,
    },

    #[error("data: duplicate subject id `{0}`")]
    DuplicateSubject(String),

    #[error("data.standardize: biomarker has zero variance")]
    ZeroVariance,

    #[error("data.standardize: no biomarker observations")]
    NoObservations,

    #[error("data.split: {0}")]
    SplitConfig(String),

    #[error("data: subject `{subject}` has no label for group column `{column}`")]
    MissingGroupLabel { subject: String, column: String },

    #[error("data: csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("data: io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth.generate: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("predictors: input has dimension {got}, model expects {expected}")]
    Dimension { got: usize, expected: usize },

    #[error("predictors.{op}: no training examples")]
    EmptyTraining { op: &'static str },

    #[error("predictors.{op}: {msg}")]
    Config { op: &'static str, msg: String },

    #[error("predictors.fit_gp: Cholesky factorisation failed even with jitter {jitter:e}")]
    Cholesky { jitter: f64 },

    #[error("predictors.fit_quantile: training diverged (non-finite loss at step {step})")]
    Diverged { step: usize },

    #[error("predictors.fit_bootstrap: singular ridge normal equations")]
    SingularRidge,

    #[error("predictors: model file: {0}")]
    Format(String),
}

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("conformal.calibrate: alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("conformal.score_subject: subject `{0}` has no visits, score is undefined")]
    EmptyTrajectory(String),

    #[error("conformal.score_subject: subject `{subject}` has {visits} visits but {preds} predictions")]
    Misaligned {
        subject: String,
        visits: usize,
        preds: usize,
    },

    #[error("conformal.build_band: empty query time list")]
    EmptyTimes,

    #[error("conformal.mondrian_calibrate: no score for calibration subject `{0}`")]
    MissingScore(String),

    #[error("conformal.band_for_subject: subject `{subject}` has unseen category `{category}` in `{column}` and fallback is disabled")]
    UnseenGroup {
        subject: String,
        column: String,
        category: String,
    },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Predict(#[from] PredictError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation.coverage_and_width: no band for test subject `{0}`")]
    MissingBand(String),

    #[error("evaluation.coverage_and_width: band for `{subject}` lacks visit month {time}")]
    Alignment { subject: String, time: u32 },

    #[error("evaluation.run_protocol: split {index} failed: {source}")]
    Split {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluation: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("risk.{op}: horizon must satisfy tN > t0 (t0 = {t0}, tN = {tn})")]
    Horizon { op: &'static str, t0: u32, tn: u32 },

    #[error("risk.{op}: both stable and progressor labels are required")]
    SingleClass { op: &'static str },

    #[error("risk.{op}: {msg}")]
    Input { op: &'static str, msg: String },

    #[error("risk.rocb: band at the horizon is unbounded")]
    InfiniteBand,
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("cli: {0}")]
    Cli(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than user input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Predict(e) | Error::Conformal(ConformalError::Predict(e)) => matches!(
                e,
                PredictError::Cholesky { .. } | PredictError::Diverged { .. } | PredictError::SingularRidge
            ),
            Error::Eval(EvalError::Split { source, .. }) => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
