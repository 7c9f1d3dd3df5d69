use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while ingesting data, building model structures or sampling.
#[derive(Debug, Error)]
pub enum MstmError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: self-loop on unit `{unit}`")]
    SelfLoop { line: usize, unit: String },

    #[error("unknown areal unit `{0}`")]
    UnknownUnit(String),

    #[error("unknown cell (variable {variable}, unit {unit})")]
    UnknownCell { variable: usize, unit: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (relative asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("requested rank {requested} exceeds the available bound N_t - rank(X_t) = {bound}")]
    RankTooLarge { requested: usize, bound: usize },

    #[error("G(B_t, I_r) is identically zero; column space of B_t spans R^r")]
    DegeneratePropagator,

    #[error("time {t}: {what} is not positive definite")]
    NotPositiveDefinite { t: usize, what: String },

    #[error("iteration {iteration}: {conditional} conditional failed: {message}")]
    Sampler {
        iteration: usize,
        conditional: &'static str,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MstmError> = std::result::Result<T, E>;

impl MstmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MstmError::Io {
            path: path.into(),
            source,
        }
    }

    /// File involved in the failure, if any.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            MstmError::Io { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Short machine-readable tag used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            MstmError::Parse { .. } => "parse",
            MstmError::SelfLoop { .. } => "self_loop",
            MstmError::UnknownUnit(_) => "unknown_unit",
            MstmError::UnknownCell { .. } => "unknown_cell",
            MstmError::Dimension(_) => "dimension",
            MstmError::Asymmetric(_) => "asymmetric",
            MstmError::RankTooLarge { .. } => "rank_too_large",
            MstmError::DegeneratePropagator => "degenerate_propagator",
            MstmError::NotPositiveDefinite { .. } => "not_positive_definite",
            MstmError::Sampler { .. } => "sampler",
            MstmError::Invalid(_) => "invalid_input",
            MstmError::Config(_) => "config",
            MstmError::Io { .. } => "io",
            MstmError::Csv(_) => "csv",
            MstmError::Json(_) => "json",
        }
    }
}
