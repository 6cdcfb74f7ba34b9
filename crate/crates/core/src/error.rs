use thiserror::Error;

/// Errors raised by the toolkit. Variants line up with the CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("convergence error: {0}")]
    Convergence(String),

    #[error("truncation error: {0}")]
    Truncation(String),

    #[error("degree {requested} exceeds the available maximum {available}")]
    Degree { requested: usize, available: usize },

    #[error("linear map is singular: {0}")]
    SingularMap(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("schema error at `{path}`: {msg}")]
    Schema { path: String, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn schema(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Schema {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema { .. } | Error::Io(_) => 2,
            Error::Domain(_)
            | Error::Dimension(_)
            | Error::SingularMap(_)
            | Error::Construction(_) => 3,
            Error::Convergence(_) | Error::Truncation(_) | Error::Degree { .. } => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Domain(_) => "domain",
            Error::Convergence(_) => "convergence",
            Error::Truncation(_) => "truncation",
            Error::Degree { .. } => "degree",
            Error::SingularMap(_) => "singular_map",
            Error::Construction(_) => "construction",
            Error::Schema { .. } => "schema",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
