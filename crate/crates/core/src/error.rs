use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("non-finite value while evaluating coordinate {index}")]
    Evaluation { index: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("infeasible alignment: {frames} frames cannot emit {labels} labels")]
    Infeasible { frames: usize, labels: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("pairing error: {0}")]
    Pairing(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("decoder step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 2 for data problems, 3 for numeric or contract
    /// failures. Usage errors (1) are produced by the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Vocabulary(_)
            | Error::Config(_)
            | Error::Format(_)
            | Error::Pairing(_)
            | Error::Io { .. } => 2,
            Error::Argument(_) => 1,
            Error::Shape { .. }
            | Error::Evaluation { .. }
            | Error::Numeric(_)
            | Error::Contract(_)
            | Error::Infeasible { .. } => 3,
            Error::AtStep { source, .. } | Error::Stage { source, .. } => source.exit_code(),
        }
    }
}
