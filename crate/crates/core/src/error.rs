use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or layer received data of the wrong shape.
    #[error("shape mismatch at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },

    #[error("non-finite value at layer {layer}: {msg}")]
    Numeric { layer: usize, msg: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("config error{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { line: Option<usize>, msg: String },

    #[error("protocol error from client {client}: {msg}")]
    Protocol { client: usize, msg: String },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("synthesis diverged at epoch {epoch}, step {step}: ce {ce:.6} exceeds 10x initial {initial:.6}")]
    Divergence {
        epoch: usize,
        step: usize,
        ce: f64,
        initial: f64,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(layer: usize, msg: impl Into<String>) -> Self {
        Error::Shape {
            layer,
            msg: msg.into(),
        }
    }

    pub fn config(line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Config {
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by a bad configuration rather than a failure while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Validation(_))
    }
}
