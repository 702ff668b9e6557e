use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping used by front ends to pick exit codes and HTTP statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: configs, trajectories, shapes.
    Config,
    /// The numerical run went off the rails.
    Runtime,
    /// Filesystem or encoding failure.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("empty polyline {index} in trajectory")]
    EmptyPolyline { index: usize },
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("invalid grid dimensions {height}x{width}")]
    InvalidDims { height: usize, width: usize },
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("degenerate attention: column mass {mass:e} below floor")]
    DegenerateAttention { mass: f64 },
    #[error("unconstrained token referenced: {token}")]
    UnconstrainedToken { token: usize },
    #[error("empty box")]
    EmptyBox,
    #[error("unusable mask for token {token}")]
    UnusableMask { token: usize },
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("token index out of range: {token} >= {len}")]
    TokenOutOfRange { token: usize, len: usize },
    #[error("unknown schema_version {0}")]
    UnknownSchema(u32),
    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),
    #[error("guidance diverged at step {step} (t={timestep}): {detail}")]
    Diverged {
        step: usize,
        timestep: usize,
        detail: String,
    },
    #[error("corrupt trace: expected {expected} bytes, found {actual}")]
    CorruptTrace { expected: u64, actual: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("image encoding failed: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Diverged { .. } | Error::DegenerateAttention { .. } => ErrorClass::Runtime,
            Error::Io { .. } | Error::Image(_) | Error::CorruptTrace { .. } => ErrorClass::Io,
            _ => ErrorClass::Config,
        }
    }

    /// Short stable identifier, used in machine-readable error payloads.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyTrajectory => "empty_trajectory",
            Error::EmptyPolyline { .. } => "empty_polyline",
            Error::InvalidTrajectory(_) => "invalid_trajectory",
            Error::InvalidDims { .. } => "invalid_dims",
            Error::EmptyPrompt => "empty_prompt",
            Error::Shape(_) => "shape_mismatch",
            Error::DegenerateAttention { .. } => "degenerate_attention",
            Error::UnconstrainedToken { .. } => "unconstrained_token",
            Error::EmptyBox => "empty_box",
            Error::UnusableMask { .. } => "unusable_mask",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::InvalidConfig(_) => "invalid_config",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::UnknownSchema(_) => "unknown_schema_version",
            Error::MalformedTrajectory(_) => "malformed_trajectory",
            Error::Diverged { .. } => "guidance_diverged",
            Error::CorruptTrace { .. } => "corrupt_trace",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Image(_) => "image",
        }
    }
}
