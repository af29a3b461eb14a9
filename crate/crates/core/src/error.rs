use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error. Every variant carries the module it originated from so
/// the command-line surface can print `error: <module>: <message>`.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value produced")]
    Numeric { op: &'static str },

    #[error("graph integrity: {0}")]
    Graph(String),

    #[error("{message}")]
    Config {
        module: &'static str,
        message: String,
    },

    #[error("{message}")]
    NumericTerm {
        module: &'static str,
        message: String,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("tensor `{name}`: expected shape {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(module: &'static str, message: impl Into<String>) -> Self {
        Error::Config {
            module,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Module name used in the machine-parseable error prefix.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Numeric { .. } | Error::Graph(_) => "diffcore",
            Error::Config { module, .. } | Error::NumericTerm { module, .. } => module,
            Error::Parse { .. } => "data",
            Error::Format { .. } | Error::TensorShape { .. } => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    /// `error: <module>: <message>`.
    pub fn report_line(&self) -> String {
        format!("error: {}: {}", self.module(), self).replace('\n', " ")
    }

    /// Process exit code: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::NumericTerm { .. } => 3,
            Error::Config { module: "cli" | "config", .. } => 1,
            _ => 2,
        }
    }
}
