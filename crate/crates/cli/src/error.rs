use leuq_core::Error as CoreError;
use std::path::PathBuf;
use thiserror::Error;

/// Command failure carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("solver failed: {0}")]
    Solver(#[source] CoreError),
    #[error("training diverged: {0}")]
    Divergence(#[source] CoreError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("inversion failed: {0}")]
    Inversion(#[source] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Solver(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Checkpoint(_) => 5,
            CliError::Inversion(_) => 6,
            CliError::Core(e) => match root(e) {
                CoreError::Config(_) | CoreError::Io(_) | CoreError::Json(_) => 2,
                CoreError::Stability { .. } => 3,
                CoreError::Divergence { .. } => 4,
                CoreError::Version { .. } | CoreError::Format(_) | CoreError::Checksum { .. } => 5,
                _ => 1,
            },
        }
    }

    /// Classifies a core error raised by `stage`, keeping config errors at 2.
    pub fn from_stage(stage: Stage, e: CoreError) -> Self {
        match (stage, root(&e)) {
            (_, CoreError::Config(_) | CoreError::Io(_) | CoreError::Json(_)) => CliError::Core(e),
            (Stage::Solve, _) => CliError::Solver(e),
            (Stage::Train, CoreError::Divergence { .. } | CoreError::Numeric { .. }) => CliError::Divergence(e),
            (Stage::Load, _) => CliError::Checkpoint(e.to_string()),
            (Stage::Invert, _) => CliError::Inversion(e),
            _ => CliError::Core(e),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Solve,
    Train,
    Load,
    Invert,
}

/// Innermost error behind per-member and per-trajectory wrappers.
fn root(e: &CoreError) -> &CoreError {
    match e {
        CoreError::Member { source, .. } | CoreError::Trajectory { source, .. } => root(source),
        other => other,
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
