use thiserror::Error;

use crate::{DeviceId, DeviceType, TokenId};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DeviceError {
    #[error("device id {0} is already registered")]
    DuplicateDevice(DeviceId),
    #[error("device {0} declares zero memory capacity")]
    ZeroCapacity(DeviceId),
    #[error("invalid descriptor for device {id}: {reason}")]
    InvalidDescriptor { id: DeviceId, reason: String },
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("out of device memory on device {device}: requested {requested} bytes, largest free block {largest_free}")]
    OutOfDeviceMemory {
        device: DeviceId,
        requested: u64,
        largest_free: u64,
    },
    #[error("allocation size must be nonzero")]
    ZeroSizeAllocation,
    #[error("double free of allocation at offset {offset} on device {device}")]
    DoubleFree { device: DeviceId, offset: u64 },
    #[error("invalid location: {0}")]
    InvalidLocation(String),
    #[error("stream index {index} out of range (device {device} has {count} compute streams)")]
    InvalidStream {
        device: DeviceId,
        index: usize,
        count: usize,
    },
    #[error("kernel argument {index} does not reside on device {device}")]
    ArgumentOnWrongDevice { device: DeviceId, index: usize },
    #[error("kernel not available for device type {0:?}")]
    UnsupportedDeviceType(DeviceType),
    #[error("unknown completion token {0}")]
    UnknownToken(TokenId),
    #[error("kernel failed: {0}")]
    KernelFailed(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T, E = DeviceError> = std::result::Result<T, E>;
