use hrt_device::{DeviceError, DeviceId, DeviceType};
use thiserror::Error;

use crate::{ObjectId, TaskId};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CoreError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("object {0} does not exist")]
    UnknownObject(ObjectId),
    #[error("object {0} has been destroyed")]
    ObjectDestroyed(ObjectId),
    #[error("object dimensions must be 1 to 3 non-zero extents with a non-zero element size")]
    InvalidShape,
    #[error("kernel `{0}` is not registered")]
    UnknownKernel(String),
    #[error("kernel `{0}` is already registered")]
    DuplicateKernel(String),
    #[error("kernel `{0}` has no body for any device type")]
    EmptyKernel(String),
    #[error("kernel `{kernel}` has no body for {device_type:?}")]
    KernelUnavailable { kernel: String, device_type: DeviceType },
    #[error("task has no target device type")]
    MissingDeviceType,
    #[error("no device of type {0:?} is registered")]
    NoDevice(DeviceType),
    #[error("object {0} appears more than once in the argument list")]
    DuplicateArgument(ObjectId),
    #[error("task {0} cannot depend on itself")]
    SelfDependency(TaskId),
    #[error("dependency cycle through task {0}")]
    Cycle(TaskId),
    #[error("conflicting host lease on object {0}")]
    LeaseConflict(ObjectId),
    #[error("no host lease held on object {0}")]
    NoLease(ObjectId),
    #[error("host lease on object {0} has not been granted yet")]
    LeaseNotGranted(ObjectId),
    #[error("access must read, write or both")]
    InvalidAccess,
    #[error("region of {available} bytes cannot hold {needed} bytes")]
    RegionTooSmall { needed: u64, available: u64 },
    #[error("data of {got} bytes does not match object size {expected}")]
    SizeMismatch { expected: u64, got: u64 },
    #[error("cannot free {needed} bytes on device {device}")]
    Unsatisfiable { device: DeviceId, needed: u64 },
    #[error("operation requires an idle runtime")]
    InFlight,
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("task failed: {0}")]
    TaskFailed(String),
    #[error("no progress possible: {0}")]
    Stalled(String),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
