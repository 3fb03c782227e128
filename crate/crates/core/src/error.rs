use thiserror::Error;

use crate::protocol::Issue;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not unitary (max deviation {0:e})")]
    NotUnitary(f64),

    #[error("zero-probability branch: {0}")]
    ZeroProbability(String),

    #[error("unknown register `{0}`")]
    UnknownRegister(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("state is not a product across the requested cut (residual {0:e})")]
    NotProduct(f64),

    #[error("protocol failed validation: {}", format_issues(.0))]
    Validation(Vec<Issue>),

    #[error("unsupported protocol: {0}")]
    Unsupported(String),

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("replay mismatch: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn format_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(|i| format!("{}: {}", i.code, i.detail))
        .collect::<Vec<_>>()
        .join("; ")
}
