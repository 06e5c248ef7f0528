use bmc_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{0}")]
    Runtime(String),

    /// Gradient check above tolerance.
    #[error("{0}")]
    Tolerance(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Tolerance(_) => 3,
            CliError::Core(e) => match e {
                CoreError::InvalidArchitecture(_)
                | CoreError::ContextOverflow { .. }
                | CoreError::TokenOutOfRange { .. }
                | CoreError::UnknownByte { .. }
                | CoreError::EmptyTarget
                | CoreError::EmptySequence(_)
                | CoreError::InvalidConfig(_)
                | CoreError::MissingHyperparameter(_)
                | CoreError::MissingDiff { .. }
                | CoreError::InvalidDiff(_)
                | CoreError::Parse { .. }
                | CoreError::UnknownMode(_) => 1,
                _ => 2,
            },
        }
    }
}
