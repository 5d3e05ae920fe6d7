//! Uniform abstraction over heterogeneous compute devices.
//!
//! Two backends are provided: the host CPU and a simulated accelerator whose
//! memory, streams and host link are modelled on a virtual (or wall) clock.
//! Each device pre-reserves its whole memory pool at registration and serves
//! allocations from it with a first-fit allocator.

pub mod allocator;
mod backend;
mod clock;
mod descriptor;
mod error;
mod memory;
mod registry;
mod sim;
mod token;
pub mod trace;

pub use allocator::{FirstFitAllocator, DEFAULT_ALIGNMENT};
pub use backend::{
    ArgView, DeviceBackend, DeviceStats, Direction, KernelArg, KernelFn, KernelInvocation,
    KernelLaunch, ThreadGeometry,
};
pub use clock::{Clock, VirtualClock};
pub use descriptor::{
    compute_streams_from_env, pinned_pool_bytes_from_env, ClockMode, DeviceConfigEntry,
    DeviceDescriptor, DeviceId, DeviceType, RegistryConfig, DEFAULT_COMPUTE_STREAMS, MIB,
    TRANSFER_STREAMS,
};
pub use error::{DeviceError, Result};
pub use memory::{
    shared_zeroed, AlignedBytes, DeviceAllocation, HostBuffer, HostPinnedPool, Location,
    PinnedPoolStats, SharedBytes,
};
pub use registry::{DeviceRegistry, RegistryBuilder};
pub use sim::{HostDevice, SharedBus, SimGpuDevice};
pub use token::{CompletionToken, TokenId, TokenKind, TokenStatus};
pub use trace::{Interval, IntervalKind, Lane, TraceEvent, TraceRecorder};
