use hrt_core::CoreError;
use thiserror::Error;

use crate::MobileRef;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("wire format: {0}")]
    Wire(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("handler {0} is not registered")]
    UnknownHandler(u32),
    #[error("rank {0} is outside the world")]
    UnknownRank(u32),
    #[error("{0:?} is owned by another rank")]
    NotOwner(MobileRef),
    #[error("{0:?} does not name a mobile object")]
    UnknownMobile(MobileRef),
    #[error("mobile object {0:?} is busy in a running handler")]
    Busy(MobileRef),
    #[error("mobile object state is not of the requested type")]
    WrongType,
    #[error("global object {0} is not published on this rank")]
    UnknownGlobal(u64),
    #[error("size mismatch: expected {expected} bytes, got {got}")]
    SizeMismatch { expected: u64, got: u64 },
    #[error("node has shut down")]
    ShutDown,
    #[error("timed out waiting for remote progress")]
    Timeout,
    #[error("handler failed: {0}")]
    Handler(String),
}

impl From<hrt_device::DeviceError> for DistError {
    fn from(e: hrt_device::DeviceError) -> Self {
        DistError::Core(CoreError::Device(e))
    }
}

impl From<std::io::Error> for DistError {
    fn from(e: std::io::Error) -> Self {
        DistError::Transport(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DistError>;
