use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;
use velopref_core::CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing input {}: run `{stage}` first", path.display())]
    MissingInput { path: PathBuf, stage: &'static str },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Process exit status classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Validation,
    Runtime,
    NonConvergence,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Runtime => 2,
            ErrorKind::NonConvergence => 3,
        }
    }
}

impl CliError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CliError::Config(_) | CliError::MissingInput { .. } => ErrorKind::Validation,
            CliError::Core(CoreError::NonConvergence { .. }) => ErrorKind::NonConvergence,
            CliError::Io { .. } | CliError::Core(_) => ErrorKind::Runtime,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind().exit_code()
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    /// The JSON document written to stderr on failure.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: ErrorKind,
            exit_code: i32,
            message: String,
            #[serde(skip_serializing_if = "Option::is_none")]
            path: Option<&'a std::path::Path>,
        }
        let path = match self {
            CliError::MissingInput { path, .. } => Some(path.as_path()),
            _ => None,
        };
        let body = Body { kind: self.kind(), exit_code: self.exit_code(), message: self.to_string(), path };
        serde_json::json!({ "error": body }).to_string()
    }
}
