use scenflow_core::cvae::CvaeError;
use scenflow_core::flow::FlowError;
use scenflow_core::io::IoError;
use scenflow_core::metrics::MetricsError;
use scenflow_core::synth::SynthError;
use thiserror::Error;

/// Command failures, grouped by the exit code they map to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage order: {0}")]
    StageOrder(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub const EXIT_USAGE: u8 = 1;
    pub const EXIT_DATA: u8 = 2;
    pub const EXIT_NUMERICAL: u8 = 3;

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::StageOrder(_) => Self::EXIT_USAGE,
            CliError::Data(_) => Self::EXIT_DATA,
            CliError::Numerical(_) => Self::EXIT_NUMERICAL,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<CvaeError> for CliError {
    fn from(e: CvaeError) -> Self {
        match e {
            CvaeError::Diverged { .. } => CliError::Numerical(e.to_string()),
            CvaeError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Diverged { .. } | FlowError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            FlowError::Config(_) | FlowError::VaeChanged { .. } => CliError::Config(e.to_string()),
            FlowError::Cvae(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
