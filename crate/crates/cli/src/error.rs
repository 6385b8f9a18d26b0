use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    /// Checkpoint and requested configuration disagree; one line per field.
    #[error("checkpoint is incompatible with the configuration:\n{}", .0.join("\n"))]
    Incompatible(Vec<String>),

    #[error(transparent)]
    Core(#[from] aren::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    /// 1 configuration, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        use aren::Error as E;
        match self {
            CliError::Config(_) | CliError::Incompatible(_) => 1,
            CliError::Core(E::Numeric(_)) => 3,
            CliError::Core(E::Data(_) | E::Io { .. } | E::Image { .. } | E::Checkpoint { .. }) => 2,
            CliError::Core(E::Contract(_) | E::Resource(_)) => 1,
        }
    }
}
