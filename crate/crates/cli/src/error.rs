use thiserror::Error;

use vemu::adaptation::AdaptError;
use vemu::analysis::AnalysisError;
use vemu::dataset::DatasetError;
use vemu::network::NetworkError;
use vemu::physics::PhysicsError;
use vemu::signal::SignalError;
use vemu::FormatError;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    /// Prefixes the message with the file it concerns.
    pub fn at(self, path: &std::path::Path) -> Self {
        let p = path.display();
        match self {
            CliError::Config(m) => CliError::Config(format!("{p}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{p}: {m}")),
            CliError::Numeric(m) => CliError::Numeric(format!("{p}: {m}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        match e {
            SignalError::Diverged { .. } | SignalError::NonFinite(_) => CliError::Numeric(e.to_string()),
            SignalError::Channel(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PhysicsError> for CliError {
    fn from(e: PhysicsError) -> Self {
        match e {
            PhysicsError::Blowup(_) | PhysicsError::SteadyState(_) => CliError::Numeric(e.to_string()),
            PhysicsError::Signal(s) => s.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Physics(p) => p.into(),
            DatasetError::Signal(s) => s.into(),
            DatasetError::Format(f) => f.into(),
            DatasetError::Phase { .. } | DatasetError::WordLength => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            NetworkError::Config(_) => CliError::Config(e.to_string()),
            NetworkError::Format(f) => f.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AdaptError> for CliError {
    fn from(e: AdaptError) -> Self {
        match e {
            AdaptError::Extrapolation { .. } => CliError::Config(e.to_string()),
            AdaptError::Network(n) => n.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Dataset(d) => d.into(),
            AnalysisError::UnknownBlock(_) | AnalysisError::TooFewTrials(_) => CliError::Config(e.to_string()),
            AnalysisError::NonPositive(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
