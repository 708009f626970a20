use btdz_core::Error as CoreError;
use serde::Serialize;
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing file: {0}")]
    MissingFile(String),

    #[error("check failed: {0}")]
    Acceptance(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Machine-readable error record written to stderr.
#[derive(Debug, Serialize)]
pub struct ErrorRecord {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    /// Config-class wrapper for core errors raised while validating input.
    pub fn config(e: CoreError) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingFile(_) => "missing_file",
            CliError::Acceptance(_) => "acceptance",
            CliError::Core(CoreError::Numerical(_)) => "numerical",
            CliError::Core(CoreError::DegenerateFeatures { .. }) => "degenerate_features",
            CliError::Core(CoreError::Format(_) | CoreError::Json(_)) => "schema",
            CliError::Core(CoreError::Io(_)) | CliError::Io(_) | CliError::Csv(_) => "io",
            CliError::Core(_) => "invalid_input",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "numerical" | "degenerate_features" => EXIT_NUMERICAL,
            "acceptance" => EXIT_ACCEPTANCE,
            _ => EXIT_CONFIG,
        }
    }

    pub fn record(&self) -> ErrorRecord {
        ErrorRecord {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::MissingFile("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(CoreError::Numerical("x".into())).exit_code(), 3);
        assert_eq!(CliError::Core(CoreError::DegenerateFeatures { rank: 1, dim: 2 }).exit_code(), 3);
        assert_eq!(CliError::Acceptance("x".into()).exit_code(), 4);
        let rec = serde_json::to_string(&CliError::Config("bad d".into()).record()).unwrap();
        assert!(rec.contains("\"error\":\"config\"") && rec.contains("\"exit_code\":2"));
    }
}
