use thiserror::Error;

/// Which population a failing particle belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Population {
    Particle,
    Limit,
    Reference,
    AuditLimit,
    AuditReference,
}

impl std::fmt::Display for Population {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Population::Particle => "particle",
            Population::Limit => "limit",
            Population::Reference => "reference",
            Population::AuditLimit => "audit-limit",
            Population::AuditReference => "audit-reference",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{population} {index} diverged at t={t}: |state| = {value} exceeds clip {clip}")]
    Divergence {
        t: f64,
        population: Population,
        index: usize,
        value: f64,
        clip: f64,
    },

    #[error("non-finite {population} state {index} at t={t}")]
    NonFinite {
        t: f64,
        population: Population,
        index: usize,
    },

    #[error("model evaluation is not finite at {location}")]
    ModelEvaluation { location: String },

    #[error("rate fit needs at least 4 usable sample sizes, found {found}")]
    DegenerateFit { found: usize },
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors raised by the numerics rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. } | Error::NonFinite { .. } | Error::ModelEvaluation { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
