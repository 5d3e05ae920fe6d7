use std::fmt;
use std::sync::Arc;

use bytemuck::Pod;
use serde::{Deserialize, Serialize};

use crate::{
    CompletionToken, DeviceAllocation, DeviceDescriptor, DeviceError, DeviceId, Location, Result,
};

/// Work decomposition of a kernel: group counts times local sizes per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThreadGeometry {
    pub groups: [u32; 3],
    pub local: [u32; 3],
}

impl Default for ThreadGeometry {
    fn default() -> Self {
        Self {
            groups: [1, 1, 1],
            local: [1, 1, 1],
        }
    }
}

impl ThreadGeometry {
    pub fn new(groups: [u32; 3], local: [u32; 3]) -> Result<Self> {
        if groups.iter().chain(local.iter()).any(|&c| c == 0) {
            return Err(DeviceError::InvalidLocation(format!(
                "thread geometry components must be >= 1, got {groups:?} x {local:?}"
            )));
        }
        Ok(Self { groups, local })
    }

    pub fn total_work_items(&self) -> u64 {
        self.groups.iter().map(|&g| g as u64).product::<u64>()
            * self.local.iter().map(|&l| l as u64).product::<u64>()
    }

    /// Global extent along each axis.
    pub fn global(&self) -> [u64; 3] {
        [0, 1, 2].map(|a| self.groups[a] as u64 * self.local[a] as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HostToDevice,
    DeviceToHost,
}

impl Direction {
    pub fn stream_index(self) -> usize {
        match self {
            Direction::HostToDevice => 0,
            Direction::DeviceToHost => 1,
        }
    }
}

/// A kernel argument as seen by the body.
pub enum ArgView<'a> {
    Read(&'a [u8]),
    Write(&'a mut [u8]),
}

impl fmt::Debug for ArgView<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArgView::Read(b) => write!(f, "Read({} bytes)", b.len()),
            ArgView::Write(b) => write!(f, "Write({} bytes)", b.len()),
        }
    }
}

impl<'a> ArgView<'a> {
    pub fn bytes(&self) -> &[u8] {
        match self {
            ArgView::Read(b) => b,
            ArgView::Write(b) => b,
        }
    }

    pub fn is_writable(&self) -> bool {
        matches!(self, ArgView::Write(_))
    }

    /// Mutable bytes. Panics on a read-only argument.
    pub fn bytes_mut(&mut self) -> &mut [u8] {
        match self {
            ArgView::Read(_) => panic!("kernel wrote to a read-only argument"),
            ArgView::Write(b) => b,
        }
    }

    pub fn as_slice<T: Pod>(&self) -> &[T] {
        bytemuck::cast_slice(self.bytes())
    }

    pub fn as_mut_slice<T: Pod>(&mut self) -> &mut [T] {
        bytemuck::cast_slice_mut(self.bytes_mut())
    }
}

/// Everything a kernel body can touch.
pub struct KernelInvocation<'a> {
    pub args: Vec<ArgView<'a>>,
    pub geometry: ThreadGeometry,
    /// Zero-initialised scratch region requested by the task.
    pub scratch: &'a mut [u8],
}

pub type KernelFn = Arc<dyn Fn(&mut KernelInvocation<'_>) -> Result<(), String> + Send + Sync>;

#[derive(Debug, Clone)]
pub struct KernelArg {
    pub location: Location,
    pub len: u64,
    pub writable: bool,
}

#[derive(Clone)]
pub struct KernelLaunch {
    pub body: KernelFn,
    pub args: Vec<KernelArg>,
    pub geometry: ThreadGeometry,
    pub scratch_bytes: usize,
    pub stream: usize,
    /// Virtual duration in seconds; measured wall time of the body when `None`.
    pub cost: Option<f64>,
    pub tag: Option<u64>,
}

impl fmt::Debug for KernelLaunch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelLaunch")
            .field("args", &self.args)
            .field("geometry", &self.geometry)
            .field("stream", &self.stream)
            .field("cost", &self.cost)
            .finish()
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DeviceStats {
    pub capacity: u64,
    pub live_bytes: u64,
    pub free_bytes: u64,
    pub live_allocations: usize,
    pub h2d_transfers: u64,
    pub d2h_transfers: u64,
    pub h2d_bytes: u64,
    pub d2h_bytes: u64,
    pub kernels: u64,
    pub unpinned_transfers: u64,
}

/// Uniform interface over one compute device.
///
/// All operations take effect on device memory in enqueue order; completion
/// tokens report when the modelled (or real) operation finishes.
pub trait DeviceBackend: Send + Sync {
    fn descriptor(&self) -> &DeviceDescriptor;

    fn id(&self) -> DeviceId {
        self.descriptor().device_id
    }

    fn pool_alloc(&self, size: u64) -> Result<DeviceAllocation>;

    fn pool_free(&self, alloc: DeviceAllocation) -> Result<()>;

    fn enqueue_transfer(
        &self,
        src: Location,
        dst: Location,
        size: u64,
        direction: Direction,
        tag: Option<u64>,
    ) -> Result<CompletionToken>;

    fn enqueue_kernel(&self, launch: KernelLaunch) -> Result<CompletionToken>;

    /// Copies out of device memory without a modelled transfer (device-aware
    /// network path).
    fn read_direct(&self, alloc: &DeviceAllocation, offset: u64, len: u64) -> Result<Vec<u8>>;

    /// Copies into device memory without a modelled transfer.
    fn write_direct(&self, alloc: &DeviceAllocation, offset: u64, data: &[u8]) -> Result<()>;

    fn stats(&self) -> DeviceStats;
}
