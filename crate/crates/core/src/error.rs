use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DkpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DkpError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("cholesky failed after jitter levels {attempted:?}")]
    Decomposition { attempted: Vec<f64> },

    #[error("singular triangular factor: zero diagonal at index {index}")]
    SingularTriangle { index: usize },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("unsupported degrees of freedom {dof} for dimension {dim} (need dof > dim - 1)")]
    UnsupportedDof { dof: f64, dim: usize },

    #[error("numeric failure in {context}: {source}")]
    Numeric {
        context: String,
        #[source]
        source: Box<DkpError>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {detail}")]
    Parse { line: usize, detail: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl DkpError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DkpError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        DkpError::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// Wraps a numeric failure with a human-readable location such as `layer 2`.
    pub fn in_context(self, context: impl Into<String>) -> Self {
        match self {
            DkpError::Io { .. } | DkpError::Config(_) | DkpError::Parse { .. } => self,
            other => DkpError::Numeric {
                context: context.into(),
                source: Box::new(other),
            },
        }
    }

    /// True for errors that come from the numerics rather than from inputs or the filesystem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            DkpError::Decomposition { .. }
                | DkpError::SingularTriangle { .. }
                | DkpError::Numeric { .. }
                | DkpError::NonFinite(_)
                | DkpError::Domain { .. }
                | DkpError::UnsupportedDof { .. }
        )
    }
}
