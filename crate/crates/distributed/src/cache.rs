//! Device memory reserved up front for incoming object payloads.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use hrt_core::{AllocationReturn, LentAllocation};
use hrt_device::{DeviceAllocation, DeviceId, DeviceRegistry};
use parking_lot::Mutex;

pub const DEFAULT_CACHE_BYTES: u64 = 16 << 20;
pub const DEFAULT_SLAB_BYTES: u64 = 1 << 20;

struct Slabs {
    free: Mutex<BTreeMap<DeviceId, Vec<DeviceAllocation>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl AllocationReturn for Slabs {
    fn return_allocation(&self, alloc: DeviceAllocation) {
        self.free.lock().entry(alloc.device_id).or_default().push(alloc);
    }
}

/// Fixed-size slabs per device. A payload that fits a free slab lands there;
/// otherwise the runtime allocates from the pool and the miss is counted.
#[derive(Clone)]
pub struct ReceiveCache {
    slabs: Arc<Slabs>,
    slab_bytes: u64,
}

impl ReceiveCache {
    /// Reserves up to `total / slab` slabs on each device; fewer if the
    /// device is smaller.
    pub fn reserve(registry: &DeviceRegistry, devices: &[DeviceId], total: u64, slab: u64) -> Self {
        let mut free = BTreeMap::new();
        if slab > 0 {
            for &d in devices {
                let mut v = Vec::new();
                for _ in 0..total / slab {
                    match registry.pool_alloc(d, slab) {
                        Ok(a) => v.push(a),
                        Err(_) => break,
                    }
                }
                v.reverse();
                free.insert(d, v);
            }
        }
        Self {
            slabs: Arc::new(Slabs {
                free: Mutex::new(free),
                hits: AtomicU64::new(0),
                misses: AtomicU64::new(0),
            }),
            slab_bytes: slab,
        }
    }

    pub fn disabled() -> Self {
        Self {
            slabs: Arc::new(Slabs {
                free: Mutex::new(BTreeMap::new()),
                hits: AtomicU64::new(0),
                misses: AtomicU64::new(0),
            }),
            slab_bytes: 0,
        }
    }

    pub fn slab_bytes(&self) -> u64 {
        self.slab_bytes
    }

    pub fn lend(&self, device: DeviceId, size: u64) -> Option<LentAllocation> {
        let slab = if size <= self.slab_bytes {
            self.slabs.free.lock().get_mut(&device).and_then(|v| v.pop())
        } else {
            None
        };
        match slab {
            Some(alloc) => {
                self.slabs.hits.fetch_add(1, Ordering::Relaxed);
                Some(LentAllocation {
                    alloc,
                    lender: self.slabs.clone(),
                })
            }
            None => {
                self.slabs.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    pub fn free_slabs(&self, device: DeviceId) -> usize {
        self.slabs.free.lock().get(&device).map_or(0, Vec::len)
    }

    pub fn hits(&self) -> u64 {
        self.slabs.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.slabs.misses.load(Ordering::Relaxed)
    }
}
