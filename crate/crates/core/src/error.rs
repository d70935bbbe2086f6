use thiserror::Error;

use crate::atmosphere::ContainerError;
use crate::harness::CheckpointError;
use crate::numerics::NumericsError;
use crate::potential_intensity::PiError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Pi(#[from] PiError),
    #[error("model: {0}")]
    Model(String),
    #[error("training diverged at {stage} step {step}: {detail}")]
    Divergence { stage: &'static str, step: u64, detail: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } => 4,
            Error::Numerics(NumericsError::NonFinite { .. }) => 4,
            _ => 3,
        }
    }
}
