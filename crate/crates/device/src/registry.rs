use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use crate::sim::{HostDevice, SharedBus, SimGpuDevice};
use crate::token::WeakToken;
use crate::{
    pinned_pool_bytes_from_env, Clock, ClockMode, CompletionToken, DeviceAllocation,
    DeviceBackend, DeviceDescriptor, DeviceError, DeviceId, DeviceType, Direction,
    HostPinnedPool, KernelLaunch, Location, RegistryConfig, Result, TokenId, TokenStatus,
    TraceRecorder,
};

/// The set of devices visible to one runtime instance, plus the clock, the
/// pinned staging pool and the trace they share.
pub struct DeviceRegistry {
    clock: Clock,
    trace: TraceRecorder,
    pinned: HostPinnedPool,
    bus: Option<Arc<SharedBus>>,
    devices: RwLock<BTreeMap<DeviceId, Arc<dyn DeviceBackend>>>,
    tokens: Mutex<HashMap<TokenId, WeakToken>>,
}

pub struct RegistryBuilder {
    clock: Clock,
    trace: TraceRecorder,
    pinned_bytes: u64,
    shared_bus: Option<f64>,
}

impl RegistryBuilder {
    pub fn clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn clock_mode(mut self, mode: ClockMode) -> Self {
        self.clock = Clock::new(mode);
        self
    }

    pub fn trace(mut self, trace: TraceRecorder) -> Self {
        self.trace = trace;
        self
    }

    pub fn pinned_pool_bytes(mut self, bytes: u64) -> Self {
        self.pinned_bytes = bytes;
        self
    }

    /// Caps the aggregate host<->device bandwidth across all devices.
    pub fn shared_bus(mut self, bytes_per_second: Option<f64>) -> Self {
        self.shared_bus = bytes_per_second;
        self
    }

    pub fn build(self) -> DeviceRegistry {
        DeviceRegistry {
            clock: self.clock,
            trace: self.trace,
            pinned: HostPinnedPool::new(self.pinned_bytes),
            bus: self.shared_bus.map(SharedBus::new),
            devices: RwLock::new(BTreeMap::new()),
            tokens: Mutex::new(HashMap::new()),
        }
    }
}

impl DeviceRegistry {
    pub fn builder() -> RegistryBuilder {
        RegistryBuilder {
            clock: Clock::new(ClockMode::Virtual),
            trace: TraceRecorder::disabled(),
            pinned_bytes: pinned_pool_bytes_from_env(),
            shared_bus: None,
        }
    }

    pub fn from_config(cfg: &RegistryConfig, trace: TraceRecorder) -> Result<Self> {
        let reg = Self::builder()
            .clock_mode(cfg.clock_mode())
            .trace(trace)
            .shared_bus(cfg.shared_bus_gbps.map(|g| g * 1e9))
            .build();
        for d in cfg.descriptors() {
            reg.register(d)?;
        }
        Ok(reg)
    }

    /// Builds the backend matching the descriptor's type and registers it.
    pub fn register(&self, desc: DeviceDescriptor) -> Result<DeviceId> {
        self.check_new(&desc)?;
        let backend: Arc<dyn DeviceBackend> = match desc.device_type {
            DeviceType::Host => Arc::new(HostDevice::new(desc, self.clock.clone(), self.trace.clone())?),
            DeviceType::GpuSim => Arc::new(SimGpuDevice::new(
                desc,
                self.clock.clone(),
                self.trace.clone(),
                self.bus.clone(),
            )?),
        };
        self.register_backend(backend)
    }

    pub fn register_backend(&self, backend: Arc<dyn DeviceBackend>) -> Result<DeviceId> {
        let desc = backend.descriptor().clone();
        self.check_new(&desc)?;
        let mut devs = self.devices.write();
        if devs.contains_key(&desc.device_id) {
            return Err(DeviceError::DuplicateDevice(desc.device_id));
        }
        devs.insert(desc.device_id, backend);
        Ok(desc.device_id)
    }

    fn check_new(&self, desc: &DeviceDescriptor) -> Result<()> {
        if self.devices.read().contains_key(&desc.device_id) {
            return Err(DeviceError::DuplicateDevice(desc.device_id));
        }
        desc.validate()
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn trace(&self) -> &TraceRecorder {
        &self.trace
    }

    pub fn pinned_pool(&self) -> &HostPinnedPool {
        &self.pinned
    }

    pub fn device(&self, id: DeviceId) -> Result<Arc<dyn DeviceBackend>> {
        self.devices
            .read()
            .get(&id)
            .cloned()
            .ok_or(DeviceError::UnknownDevice(id))
    }

    pub fn devices(&self) -> Vec<Arc<dyn DeviceBackend>> {
        self.devices.read().values().cloned().collect()
    }

    pub fn ids(&self) -> Vec<DeviceId> {
        self.devices.read().keys().copied().collect()
    }

    pub fn ids_of_type(&self, ty: DeviceType) -> Vec<DeviceId> {
        self.devices
            .read()
            .iter()
            .filter(|(_, d)| d.descriptor().device_type == ty)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.devices.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pool_alloc(&self, device: DeviceId, size: u64) -> Result<DeviceAllocation> {
        self.device(device)?.pool_alloc(size)
    }

    pub fn pool_free(&self, alloc: DeviceAllocation) -> Result<()> {
        self.device(alloc.device_id)?.pool_free(alloc)
    }

    /// Enqueues a host<->device copy on the device side of the transfer.
    pub fn enqueue_transfer(
        &self,
        src: Location,
        dst: Location,
        size: u64,
        direction: Direction,
    ) -> Result<CompletionToken> {
        self.enqueue_transfer_tagged(src, dst, size, direction, None)
    }

    pub fn enqueue_transfer_tagged(
        &self,
        src: Location,
        dst: Location,
        size: u64,
        direction: Direction,
        tag: Option<u64>,
    ) -> Result<CompletionToken> {
        let dev = match direction {
            Direction::HostToDevice => dst.device_id(),
            Direction::DeviceToHost => src.device_id(),
        }
        .ok_or_else(|| DeviceError::InvalidLocation(format!("{direction:?} needs a device endpoint")))?;
        let token = self
            .device(dev)?
            .enqueue_transfer(src, dst, size, direction, tag)?;
        self.track(&token);
        Ok(token)
    }

    pub fn enqueue_kernel(&self, device: DeviceId, launch: KernelLaunch) -> Result<CompletionToken> {
        let token = self.device(device)?.enqueue_kernel(launch)?;
        self.track(&token);
        Ok(token)
    }

    fn track(&self, token: &CompletionToken) {
        let mut map = self.tokens.lock();
        if map.len() >= 4096 && map.len().is_power_of_two() {
            map.retain(|_, w| w.upgrade().is_some());
        }
        map.insert(token.id(), token.downgrade());
    }

    /// Non-blocking status of a token issued through this registry. Under the
    /// virtual clock a pending token moves time to the next pending event.
    pub fn poll(&self, id: TokenId) -> Result<TokenStatus> {
        let token = self
            .tokens
            .lock()
            .get(&id)
            .and_then(|w| w.upgrade())
            .ok_or(DeviceError::UnknownToken(id))?;
        let status = token.status();
        if status == TokenStatus::Pending {
            if let Clock::Virtual(v) = &self.clock {
                v.advance_to_next();
                return Ok(token.status());
            }
        }
        Ok(status)
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }
}
