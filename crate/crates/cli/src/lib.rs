//! Batch experiment driver for the multi-scale domain adversarial network.

pub mod app;
pub mod config;
pub mod experiment;
pub mod svg;

use thiserror::Error;

pub use config::{ConfigError, ExperimentConfig, Method};
pub use svg::PlotError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Args(#[from] clap::Error),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] m2dan_core::Error),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for data and file
    /// problems, 3 for a numeric failure during training.
    pub fn exit_code(&self) -> i32 {
        use m2dan_core::Error as E;
        match self {
            CliError::Args(e) => i32::from(e.use_stderr()),
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(E::NonFiniteLoss { .. }) => 3,
            CliError::Core(
                E::InvalidSpec(_) | E::UnsupportedKernel(_) | E::IndivisibleBatch { .. },
            ) => 1,
            CliError::Core(_) | CliError::Plot(_) | CliError::Io { .. } => 2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Config(ConfigError::UnknownKey("k".into())).exit_code(), 1);
        assert_eq!(CliError::Core(m2dan_core::Error::NonFiniteLoss { step: 3 }).exit_code(), 3);
        assert_eq!(CliError::Core(m2dan_core::Error::CorruptFile("x".into())).exit_code(), 2);
        assert_eq!(CliError::Plot(PlotError::MalformedCsv("x".into())).exit_code(), 2);
    }
}
