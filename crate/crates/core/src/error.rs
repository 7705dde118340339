use thiserror::Error;

/// Library-wide error type. Validation failures (bad arguments, malformed
/// graphs, capacity overruns) are distinguished from runtime failures so the
/// CLI can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("capacity exceeded: {what} needs {needed} states, guard is {guard} (set GFNLAB_CAPACITY or pass a larger guard)")]
    Capacity {
        what: String,
        needed: u128,
        guard: u64,
    },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("unknown state id {0}")]
    UnknownState(usize),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("policy lacks parameters required here: {0}")]
    MissingParams(&'static str),

    #[error("non-finite value during training at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },
}

impl Error {
    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
