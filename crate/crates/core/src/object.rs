use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Weak};

use hrt_device::{CompletionToken, DeviceAllocation, DeviceId, HostBuffer};
use parking_lot::Mutex;

use crate::{CoreError, Result};

pub type ObjectId = u64;

/// Shape of an object: element size and 1 to 3 extents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectDesc {
    pub elem_size: u64,
    pub dims: Vec<u64>,
}

impl ObjectDesc {
    pub fn new(dims: &[u64], elem_size: u64) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 || dims.contains(&0) || elem_size == 0 {
            return Err(CoreError::InvalidShape);
        }
        Ok(Self {
            elem_size,
            dims: dims.to_vec(),
        })
    }

    pub fn of<T>(dims: &[u64]) -> Result<Self> {
        Self::new(dims, std::mem::size_of::<T>() as u64)
    }

    pub fn elements(&self) -> u64 {
        self.dims.iter().product()
    }

    pub fn size_bytes(&self) -> u64 {
        self.elements() * self.elem_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CopyState {
    Valid,
    Stale,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessMode {
    Read,
    Write,
    ReadWrite,
}

impl AccessMode {
    pub fn from_flags(read: bool, write: bool) -> Result<Self> {
        match (read, write) {
            (true, false) => Ok(AccessMode::Read),
            (false, true) => Ok(AccessMode::Write),
            (true, true) => Ok(AccessMode::ReadWrite),
            (false, false) => Err(CoreError::InvalidAccess),
        }
    }

    pub fn reads(self) -> bool {
        matches!(self, AccessMode::Read | AccessMode::ReadWrite)
    }

    pub fn writes(self) -> bool {
        matches!(self, AccessMode::Write | AccessMode::ReadWrite)
    }

    pub fn conflicts(self, other: AccessMode) -> bool {
        self.writes() || other.writes()
    }
}

/// Where a copy of an object lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Place {
    Host,
    Device(DeviceId),
}

/// Snapshot of an object's copy states.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CopyStates {
    pub host: CopyState,
    pub devices: BTreeMap<DeviceId, CopyState>,
}

impl CopyStates {
    pub fn get(&self, place: Place) -> CopyState {
        match place {
            Place::Host => self.host,
            Place::Device(d) => self.devices.get(&d).copied().unwrap_or(CopyState::Absent),
        }
    }

    pub fn valid_places(&self) -> Vec<Place> {
        let mut v = Vec::new();
        if self.host == CopyState::Valid {
            v.push(Place::Host);
        }
        v.extend(
            self.devices
                .iter()
                .filter(|(_, s)| **s == CopyState::Valid)
                .map(|(&d, _)| Place::Device(d)),
        );
        v
    }
}

/// Receives device allocations that were lent to an object by someone other
/// than the device pool (e.g. a receive cache) when the object lets go of them.
pub trait AllocationReturn: Send + Sync {
    fn return_allocation(&self, alloc: DeviceAllocation);
}

pub(crate) type DropQueue = Mutex<Vec<ObjectId>>;

struct HandleInner {
    id: ObjectId,
    desc: ObjectDesc,
    drops: Weak<DropQueue>,
}

impl Drop for HandleInner {
    fn drop(&mut self) {
        if let Some(q) = self.drops.upgrade() {
            q.lock().push(self.id);
        }
    }
}

/// Reference-counted user handle. Dropping the last clone requests
/// destruction; the runtime destroys the object once no operation needs it.
#[derive(Clone)]
pub struct ObjectHandle(Arc<HandleInner>);

impl fmt::Debug for ObjectHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectHandle({})", self.0.id)
    }
}

impl PartialEq for ObjectHandle {
    fn eq(&self, other: &Self) -> bool {
        self.0.id == other.0.id
    }
}

impl ObjectHandle {
    pub(crate) fn new(id: ObjectId, desc: ObjectDesc, drops: &Arc<DropQueue>) -> Self {
        Self(Arc::new(HandleInner {
            id,
            desc,
            drops: Arc::downgrade(drops),
        }))
    }

    pub fn id(&self) -> ObjectId {
        self.0.id
    }

    pub fn desc(&self) -> &ObjectDesc {
        &self.0.desc
    }

    pub fn size_bytes(&self) -> u64 {
        self.0.desc.size_bytes()
    }
}

pub(crate) struct DeviceCopy {
    pub alloc: DeviceAllocation,
    pub state: CopyState,
    pub fill: Option<CompletionToken>,
    pub lender: Option<Arc<dyn AllocationReturn>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub(crate) enum HostLease {
    #[default]
    None,
    Read(u32),
    Write,
}

#[derive(Default)]
pub(crate) struct ObjectRecord {
    pub id: ObjectId,
    pub size: u64,
    pub host: Option<HostBuffer>,
    pub host_state: Option<CopyState>,
    pub host_fill: Option<CompletionToken>,
    pub copies: BTreeMap<DeviceId, DeviceCopy>,
    /// Operations currently issued against the object.
    pub active: Vec<u64>,
    pub lru_tick: u64,
    /// Submitted operations that have not finished.
    pub ref_count: usize,
    pub lease: HostLease,
    pub destroy_requested: bool,
}

impl ObjectRecord {
    pub fn reset(&mut self, id: ObjectId, size: u64) {
        self.id = id;
        self.size = size;
        self.host = None;
        self.host_state = None;
        self.host_fill = None;
        self.copies.clear();
        self.active.clear();
        self.lru_tick = 0;
        self.ref_count = 0;
        self.lease = HostLease::None;
        self.destroy_requested = false;
    }

    pub fn host_state(&self) -> CopyState {
        self.host_state.unwrap_or(CopyState::Absent)
    }

    pub fn state_at(&self, place: Place) -> CopyState {
        match place {
            Place::Host => self.host_state(),
            Place::Device(d) => self.copies.get(&d).map_or(CopyState::Absent, |c| c.state),
        }
    }

    pub fn set_state(&mut self, place: Place, state: CopyState) {
        match place {
            Place::Host => self.host_state = Some(state),
            Place::Device(d) => {
                if let Some(c) = self.copies.get_mut(&d) {
                    c.state = state;
                }
            }
        }
    }

    /// Promotes finished fills to VALID; returns whether any fill is still pending.
    pub fn settle_fills(&mut self) -> bool {
        let mut pending = false;
        if let Some(t) = &self.host_fill {
            if t.is_done() {
                self.host_fill = None;
                self.host_state = Some(CopyState::Valid);
            } else {
                pending = true;
            }
        }
        for c in self.copies.values_mut() {
            if let Some(t) = &c.fill {
                if t.is_done() {
                    c.fill = None;
                    c.state = CopyState::Valid;
                } else {
                    pending = true;
                }
            }
        }
        pending
    }

    pub fn any_valid(&self) -> bool {
        self.host_state() == CopyState::Valid
            || self.copies.values().any(|c| c.state == CopyState::Valid)
    }

    /// First VALID device copy in id order.
    pub fn valid_device(&self) -> Option<DeviceId> {
        self.copies
            .iter()
            .find(|(_, c)| c.state == CopyState::Valid)
            .map(|(&d, _)| d)
    }

    /// A write at `place` completed: it becomes the only VALID copy.
    pub fn mark_written(&mut self, place: Place) {
        if self.host_state.is_some() {
            self.host_state = Some(CopyState::Stale);
        }
        self.host_fill = None;
        for c in self.copies.values_mut() {
            c.state = CopyState::Stale;
            c.fill = None;
        }
        self.set_state(place, CopyState::Valid);
    }

    pub fn snapshot(&self) -> CopyStates {
        CopyStates {
            host: self.host_state(),
            devices: self.copies.iter().map(|(&d, c)| (d, c.state)).collect(),
        }
    }

    pub fn idle(&self) -> bool {
        self.active.is_empty()
    }
}
