//! Error type shared by every subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("routing error: {0}")]
    Routing(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("payload size error: {0}")]
    Size(String),

    #[error("handler failed on {chare} at t={time_us}: {message}")]
    Handler {
        chare: String,
        time_us: f64,
        message: String,
    },

    #[error("event limit {limit} exceeded, hottest entity {entity} ({count} events): suspected livelock")]
    Livelock {
        limit: u64,
        entity: String,
        count: u64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type SimResult<V> = Result<V, SimError>;
