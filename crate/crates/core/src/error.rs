use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside its admissible domain.
    #[error("parameter domain error: {0}")]
    Domain(String),

    /// GEV support constraint `1 + xi (y - mu) / sigma > 0` failed.
    #[error("GEV support violation at site {site:?}: value {value}, 1 + xi*z = {margin}")]
    Support {
        site: Option<usize>,
        value: f64,
        margin: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Cholesky factorization failed even after jitter escalation.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("blocks failed to converge: {0:?}")]
    NonConverged(Vec<usize>),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Data(_) | Error::Support { .. } | Error::Csv(_) | Error::Io(_) => 3,
            Error::Json(_) | Error::Protocol(_) => 3,
            Error::DegenerateGeometry(_) | Error::Numerical(_) | Error::NonConverged(_) => 4,
        }
    }
}
