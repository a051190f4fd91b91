use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Core(#[from] limix_core::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// 0 is success; 2 configuration, 3 numerical divergence, 4 missing
    /// artifact, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use limix_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact(_) => 4,
            CliError::Core(E::Config(_) | E::Mode | E::UndefinedRatio(_)) => 2,
            CliError::Core(E::Divergence { .. } | E::Numerical { .. }) => 3,
            CliError::Core(E::Component { source, .. }) if matches!(**source, E::Divergence { .. } | E::Numerical { .. }) => 3,
            _ => 1,
        }
    }
}
