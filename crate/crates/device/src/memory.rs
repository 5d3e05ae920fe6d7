//! Byte storage shared between host regions and simulated device memory.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::allocator::{AllocError, FirstFitAllocator};
use crate::DeviceId;

/// Heap bytes with 8-byte alignment so kernels can view them as `f64`/`u64`.
#[derive(Clone, Default)]
pub struct AlignedBytes {
    words: Vec<u64>,
    len: usize,
}

impl fmt::Debug for AlignedBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AlignedBytes({} bytes)", self.len)
    }
}

impl AlignedBytes {
    pub fn zeroed(len: usize) -> Self {
        Self {
            words: vec![0u64; len.div_ceil(8)],
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[u8] {
        &bytemuck::cast_slice::<u64, u8>(&self.words)[..self.len]
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut bytemuck::cast_slice_mut::<u64, u8>(&mut self.words)[..self.len]
    }
}

pub type SharedBytes = Arc<RwLock<AlignedBytes>>;

pub fn shared_zeroed(len: usize) -> SharedBytes {
    Arc::new(RwLock::new(AlignedBytes::zeroed(len)))
}

/// A region carved from a device's pre-reserved pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct DeviceAllocation {
    pub device_id: DeviceId,
    pub offset: u64,
    pub size: u64,
    pub alignment: u64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PinnedPoolStats {
    pub capacity: u64,
    pub live_bytes: u64,
    pub hits: u64,
    pub misses: u64,
}

struct PinnedPoolInner {
    alloc: Mutex<FirstFitAllocator>,
    hits: AtomicU64,
    misses: AtomicU64,
}

/// Page-locked staging memory reserved once at start-up.
///
/// Requests that do not fit fall back to ordinary host memory and bump the
/// `pinned_pool_miss` counter.
#[derive(Clone)]
pub struct HostPinnedPool(Arc<PinnedPoolInner>);

impl fmt::Debug for HostPinnedPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("HostPinnedPool").field(&self.stats()).finish()
    }
}

impl HostPinnedPool {
    pub fn new(capacity: u64) -> Self {
        Self(Arc::new(PinnedPoolInner {
            alloc: Mutex::new(FirstFitAllocator::with_alignment(capacity, 64)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }))
    }

    pub fn allocate(&self, len: usize) -> HostBuffer {
        let slot = if len == 0 {
            None
        } else {
            match self.0.alloc.lock().allocate(len as u64) {
                Ok(off) => Some(off),
                Err(AllocError::OutOfMemory { .. }) | Err(_) => None,
            }
        };
        match slot {
            Some(_) => self.0.hits.fetch_add(1, Ordering::Relaxed),
            None => self.0.misses.fetch_add(1, Ordering::Relaxed),
        };
        HostBuffer(Arc::new(HostBufferInner {
            bytes: shared_zeroed(len),
            pinned: slot.map(|off| (self.clone(), off)),
        }))
    }

    pub fn misses(&self) -> u64 {
        self.0.misses.load(Ordering::Relaxed)
    }

    pub fn stats(&self) -> PinnedPoolStats {
        let a = self.0.alloc.lock();
        PinnedPoolStats {
            capacity: a.capacity(),
            live_bytes: a.live_bytes(),
            hits: self.0.hits.load(Ordering::Relaxed),
            misses: self.0.misses.load(Ordering::Relaxed),
        }
    }
}

struct HostBufferInner {
    bytes: SharedBytes,
    pinned: Option<(HostPinnedPool, u64)>,
}

impl Drop for HostBufferInner {
    fn drop(&mut self) {
        if let Some((pool, off)) = self.pinned.take() {
            let _ = pool.0.alloc.lock().free(off);
        }
    }
}

/// Host memory region. Clones share the same bytes.
#[derive(Clone)]
pub struct HostBuffer(Arc<HostBufferInner>);

impl fmt::Debug for HostBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HostBuffer")
            .field("len", &self.len())
            .field("pinned", &self.is_pinned())
            .finish()
    }
}

impl HostBuffer {
    /// Ordinary (unpinned) host memory.
    pub fn unpinned(len: usize) -> Self {
        Self(Arc::new(HostBufferInner {
            bytes: shared_zeroed(len),
            pinned: None,
        }))
    }

    pub fn from_bytes(data: &[u8]) -> Self {
        let b = Self::unpinned(data.len());
        b.write().as_mut_slice().copy_from_slice(data);
        b
    }

    pub fn len(&self) -> usize {
        self.0.bytes.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_pinned(&self) -> bool {
        self.0.pinned.is_some()
    }

    pub fn shared(&self) -> &SharedBytes {
        &self.0.bytes
    }

    pub fn read(&self) -> parking_lot::RwLockReadGuard<'_, AlignedBytes> {
        self.0.bytes.read()
    }

    pub fn write(&self) -> parking_lot::RwLockWriteGuard<'_, AlignedBytes> {
        self.0.bytes.write()
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.read().as_slice().to_vec()
    }

    pub fn same_region(&self, other: &HostBuffer) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// Endpoint of a transfer or a kernel argument.
#[derive(Debug, Clone)]
pub enum Location {
    Host { buffer: HostBuffer, offset: u64 },
    Device { alloc: DeviceAllocation, offset: u64 },
}

impl Location {
    pub fn host(buffer: &HostBuffer) -> Self {
        Location::Host {
            buffer: buffer.clone(),
            offset: 0,
        }
    }

    pub fn device(alloc: DeviceAllocation) -> Self {
        Location::Device { alloc, offset: 0 }
    }

    pub fn device_id(&self) -> Option<DeviceId> {
        match self {
            Location::Host { .. } => None,
            Location::Device { alloc, .. } => Some(alloc.device_id),
        }
    }
}
