use std::path::PathBuf;

use thiserror::Error;

use crate::simkernel::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("time overflow: {lhs} + {rhs}")]
    TimeOverflow { lhs: SimTime, rhs: SimTime },
    #[error("time underflow: {lhs} - {rhs}")]
    TimeUnderflow { lhs: SimTime, rhs: SimTime },
    #[error("cannot schedule at {fire_at}: clock is already at {now}")]
    ScheduleInPast { fire_at: SimTime, now: SimTime },
}

/// A validation failure pinned to a field path such as `agents[2].segments[1].start_us`.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        FieldError {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid {what}: {}", join_fields(.errors))]
    Invalid {
        what: &'static str,
        errors: Vec<FieldError>,
    },
    #[error("cycle: {}", .0.join("→"))]
    Cycle(Vec<String>),
    #[error("channel `{channel}` has multiple producers: {producers:?}")]
    MultiProducer {
        channel: String,
        producers: Vec<String>,
    },
    #[error("channel `{channel}` referenced by `{node}` does not exist")]
    DanglingChannel { node: String, channel: String },
    #[error("group `{group}` pins unknown node `{node}`")]
    MissingNode { group: String, node: String },
    #[error("node `{0}` is not pinned to any processor group")]
    Unpinned(String),
    #[error("engine configuration: {0}")]
    Config(String),
    #[error("empty sample set")]
    EmptySamples,
    #[error("at least {need} points required, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("traces are not comparable: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Usage(String),
}

fn join_fields(errors: &[FieldError]) -> String {
    errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub fn invalid(what: &'static str, errors: Vec<FieldError>) -> Self {
        Error::Invalid { what, errors }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
