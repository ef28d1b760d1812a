use serde::Serialize;
use thiserror::Error;

/// Failures surfaced by the command-line front end.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error("duplicate timestamp {time}")]
    DuplicateTimestamp { time: f64 },
    #[error("file has no data rows: {0}")]
    EmptyFile(String),
    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Core(#[from] nsmgp::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Machine-readable form written to stderr on failure.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), msg: e.to_string() }
    }

    pub fn kind(&self) -> &'static str {
        use nsmgp::Error as E;
        match self {
            CliError::Config(_) => "config",
            CliError::Parse { .. } => "parse",
            CliError::DuplicateTimestamp { .. } => "duplicate_timestamp",
            CliError::EmptyFile(_) => "empty_file",
            CliError::Io { .. } => "io",
            CliError::Core(e) => match e {
                E::NotPositiveDefinite { .. } => "not_positive_definite",
                E::NoConvergence => "no_convergence",
                E::DimensionMismatch(_) => "dimension_mismatch",
                E::DegenerateData(_) => "degenerate_data",
                E::NonFinite(_) => "non_finite",
                E::ZeroVariance { .. } => "zero_variance",
                E::EmptyHoldout => "empty_holdout",
                E::EmptyTraining => "empty_training",
                E::InvalidParams(_) => "invalid_params",
            },
        }
    }

    /// 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        use nsmgp::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Parse { .. } | CliError::DuplicateTimestamp { .. } | CliError::EmptyFile(_) => 3,
            CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::InvalidParams(_) => 2,
                E::DimensionMismatch(_) | E::DegenerateData(_) | E::EmptyHoldout | E::EmptyTraining => 3,
                E::NotPositiveDefinite { .. } | E::NoConvergence | E::NonFinite(_) | E::ZeroVariance { .. } => 4,
            },
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport { error: self.kind(), message: self.to_string(), exit_code: self.exit_code() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_category() {
        use nsmgp::Error as E;
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(E::InvalidParams("x".into())).exit_code(), 2);
        assert_eq!(CliError::EmptyFile("f".into()).exit_code(), 3);
        assert_eq!(CliError::Core(E::EmptyTraining).exit_code(), 3);
        assert_eq!(CliError::Core(E::NotPositiveDefinite { cap: 1e-4 }).exit_code(), 4);
        assert_eq!(CliError::Core(E::NonFinite("x".into())).exit_code(), 4);
        assert_eq!(CliError::Core(E::NoConvergence).exit_code(), 4);
    }

    #[test]
    fn report_serializes() {
        let r = CliError::DuplicateTimestamp { time: 2.5 }.report();
        let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(v["error"], "duplicate_timestamp");
        assert_eq!(v["exit_code"], 3);
        assert!(v["message"].as_str().unwrap().contains("2.5"));
    }
}
