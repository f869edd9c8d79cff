use thiserror::Error;

/// Errors raised across the model pipeline.
#[derive(Debug, Error)]
pub enum SkyError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown {kind} `{id}`")]
    Unknown { kind: &'static str, id: String },

    #[error("singular ownership-masked share Jacobian in market {market}")]
    SingularJacobian { market: String },

    #[error("price equilibrium did not converge in market {market} after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        market: String,
        iterations: usize,
        residual: f64,
    },

    #[error("rank-deficient design; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("validation failed:\n{}", messages.join("\n"))]
    Validation { messages: Vec<String> },

    #[error("calibration failed:\n{}", diagnostics.join("\n"))]
    Calibration { diagnostics: Vec<String> },

    #[error("covariance matrix is not positive semidefinite after ridge")]
    NotPsd,

    #[error("empty confidence region")]
    EmptyRegion,

    #[error("mismatched run keys: {0}")]
    RunKeyMismatch(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl SkyError {
    pub fn domain(msg: impl Into<String>) -> Self {
        SkyError::Domain(msg.into())
    }

    pub fn unknown(kind: &'static str, id: impl Into<String>) -> Self {
        SkyError::Unknown {
            kind,
            id: id.into(),
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SkyError::Validation { .. } | SkyError::Calibration { .. } => 2,
            SkyError::NonConvergence { .. } => 3,
            SkyError::EmptyRegion => 4,
            _ => 1,
        }
    }

    /// Short machine-readable tag for error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            SkyError::Domain(_) => "domain",
            SkyError::Unknown { .. } => "unknown_id",
            SkyError::SingularJacobian { .. } => "singular_jacobian",
            SkyError::NonConvergence { .. } => "non_convergence",
            SkyError::RankDeficient { .. } => "rank_deficient",
            SkyError::Validation { .. } => "validation",
            SkyError::Calibration { .. } => "calibration",
            SkyError::NotPsd => "not_psd",
            SkyError::EmptyRegion => "empty_region",
            SkyError::RunKeyMismatch(_) => "run_key_mismatch",
            SkyError::Io { .. } => "io",
            SkyError::Csv { .. } => "csv",
            SkyError::Json { .. } => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, SkyError>;
