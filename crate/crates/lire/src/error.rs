//! Crate-wide error type.
//!
//! Every fallible operation in the engine returns [`Error`]. Pipeline stages
//! wrap inner errors with [`Error::stage`] so a failure names where it
//! happened (e.g. `self-answer: generator: connection refused`).

use std::io;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix or embedding shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An operation was called with inconsistent or stale state
    /// (e.g. a backward pass with a cache from a different forward pass).
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A contract precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Non-finite values showed up where finite math was required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A binary file failed validation; `offset` is the byte position
    /// at which the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Bad build or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Training diverged; `step` is the 1-based step at which loss
    /// stopped being finite.
    #[error("training diverged at step {step}: {message}")]
    Training { step: usize, message: String },

    /// Remote generator did not respond in time.
    #[error("generator timeout: {0}")]
    Timeout(String),

    /// Remote generator could not be reached.
    #[error("generator connection failure: {0}")]
    Connection(String),

    /// Remote generator replied with something that is not the wire format
    /// (malformed JSON, missing fields, non-2xx status).
    #[error("generator protocol error: {0}")]
    Protocol(String),

    /// An error annotated with the pipeline stage it occurred in.
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap an error with the name of the pipeline stage it occurred in.
    pub fn stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }

    /// The outermost stage annotation, if any.
    pub fn stage_name(&self) -> Option<&str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_annotation_chains_in_display() {
        let inner = Error::Connection("refused".into());
        let err = Error::stage("self-answer", inner);
        assert_eq!(err.stage_name(), Some("self-answer"));
        assert_eq!(
            err.to_string(),
            "self-answer: generator connection failure: refused"
        );
    }
}
