//! Error types shared by every estimator component.

use thiserror::Error;

/// Location of a numerical failure inside the (market, product, consumer) grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Site {
    pub market: Option<usize>,
    pub product: Option<usize>,
    pub consumer: Option<usize>,
}

impl Site {
    pub fn market(t: usize) -> Self {
        Self {
            market: Some(t),
            ..Self::default()
        }
    }

    pub fn product(t: usize, j: usize) -> Self {
        Self {
            market: Some(t),
            product: Some(j),
            consumer: None,
        }
    }

    pub fn cell(t: usize, j: usize, i: usize) -> Self {
        Self {
            market: Some(t),
            product: Some(j),
            consumer: Some(i),
        }
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if let Some(t) = self.market {
            parts.push(format!("market {t}"));
        }
        if let Some(j) = self.product {
            parts.push(format!("product {j}"));
        }
        if let Some(i) = self.consumer {
            parts.push(format!("consumer {i}"));
        }
        if parts.is_empty() {
            write!(f, "<unlocated>")
        } else {
            write!(f, "{}", parts.join(", "))
        }
    }
}

/// A single schema or invariant violation found while ingesting data.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemaIssue {
    pub file: String,
    /// 1-based data row (header excluded); `None` for file-level problems.
    pub row: Option<usize>,
    pub column: Option<String>,
    pub message: String,
}

impl std::fmt::Display for SchemaIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.file)?;
        if let Some(row) = self.row {
            write!(f, " row {row}")?;
        }
        if let Some(col) = &self.column {
            write!(f, " column '{col}'")?;
        }
        write!(f, ": {}", self.message)
    }
}

#[derive(Debug, Error)]
pub enum BlpError {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure in {context} at {site}")]
    Numerical { context: &'static str, site: Site },

    #[error("share Jacobian is singular or ill-conditioned at {site} (condition estimate {condition:.3e})")]
    SingularJacobian { site: Site, condition: f64 },

    #[error("{context} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
        last_iterate: Vec<f64>,
    },

    #[error("weighting or normal matrix is singular: {0}")]
    Singular(String),

    #[error("schema violations:\n{}", format_issues(.0))]
    Schema(Vec<SchemaIssue>),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

fn format_issues(issues: &[SchemaIssue]) -> String {
    issues
        .iter()
        .map(|issue| format!("  {issue}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl BlpError {
    pub fn dimension_mismatch(what: &'static str, expected: usize, found: usize) -> Self {
        Self::DimensionMismatch {
            what,
            expected,
            found,
        }
    }

    pub fn numerical(context: &'static str, site: Site) -> Self {
        Self::Numerical { context, site }
    }

    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Self::DimensionMismatch { .. } | Self::InvalidInput(_) | Self::Schema(_) | Self::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, BlpError>;
