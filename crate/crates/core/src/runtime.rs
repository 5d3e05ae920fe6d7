use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use bytemuck::Pod;
use hrt_device::{
    Clock, DeviceId, DeviceRegistry, DeviceType, HostBuffer, Location, ThreadGeometry,
};
use parking_lot::{Mutex, RwLock};

use crate::app::{KernelDefinition, KernelRef, KernelRegistry, TaskBuilder};
use crate::engine::{RuntimeStats, State};
use crate::object::{DropQueue, HostLease, ObjectRecord};
use crate::scheduler::{Scheduler, SchedulerKind};
use crate::task::{AccessTarget, LentAllocation, Op, OpKind};
use crate::{
    pool, AccessMode, CopyState, CopyStates, CoreError, ObjectDesc, ObjectHandle, ObjectId, Place,
    Result, TaskId, TaskState,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub scheduler: SchedulerKind,
    /// Wall-clock mode only: one background progress thread per device.
    pub dedicated_threads: bool,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            scheduler: SchedulerKind::Locality,
            dedicated_threads: false,
        }
    }
}

impl RuntimeConfig {
    /// Reads `HRT_SCHEDULER` and `HRT_DEDICATED_THREADS`.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Some(k) = std::env::var("HRT_SCHEDULER").ok().and_then(|s| s.parse().ok()) {
            c.scheduler = k;
        }
        c.dedicated_threads = std::env::var("HRT_DEDICATED_THREADS")
            .map(|v| matches!(v.trim(), "1" | "true" | "yes" | "on"))
            .unwrap_or(false);
        c
    }
}

/// Extra progress callback, run before the clock is advanced while waiting.
pub type CoProgress = Arc<dyn Fn() -> usize + Send + Sync>;

pub(crate) struct Inner {
    pub registry: Arc<DeviceRegistry>,
    kernels: RwLock<KernelRegistry>,
    pub(crate) state: Mutex<State>,
    submissions: Mutex<VecDeque<Box<Op>>>,
    pending: AtomicUsize,
    drops: Arc<DropQueue>,
    next_task: AtomicU64,
    next_object: AtomicU64,
    progress_lock: Mutex<()>,
    co_progress: RwLock<Option<CoProgress>>,
    shutdown: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
    config: RuntimeConfig,
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Release);
    }
}

/// The tasking runtime. Cheap to clone; all clones share one instance.
#[derive(Clone)]
pub struct Runtime(pub(crate) Arc<Inner>);

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("devices", &self.0.registry.ids())
            .field("config", &self.0.config)
            .finish()
    }
}

impl Runtime {
    pub fn new(registry: Arc<DeviceRegistry>) -> Self {
        Self::with_config(registry, RuntimeConfig::from_env())
    }

    pub fn with_config(registry: Arc<DeviceRegistry>, config: RuntimeConfig) -> Self {
        let state = State::new(config.scheduler.build(), &registry);
        let rt = Runtime(Arc::new(Inner {
            registry,
            kernels: RwLock::new(KernelRegistry::default()),
            state: Mutex::new(state),
            submissions: Mutex::new(VecDeque::new()),
            pending: AtomicUsize::new(0),
            drops: Arc::new(Mutex::new(Vec::new())),
            next_task: AtomicU64::new(1),
            next_object: AtomicU64::new(1),
            progress_lock: Mutex::new(()),
            co_progress: RwLock::new(None),
            shutdown: AtomicBool::new(false),
            threads: Mutex::new(Vec::new()),
            config,
        }));
        if rt.0.config.dedicated_threads && !rt.0.registry.clock().is_virtual() {
            rt.spawn_progress_threads();
        }
        rt
    }

    fn spawn_progress_threads(&self) {
        let mut threads = self.0.threads.lock();
        for d in self.0.registry.ids() {
            let weak: Weak<Inner> = Arc::downgrade(&self.0);
            let h = std::thread::Builder::new()
                .name(format!("hrt-progress-{d}"))
                .spawn(move || loop {
                    let Some(inner) = weak.upgrade() else { return };
                    if inner.shutdown.load(Ordering::Acquire) {
                        return;
                    }
                    let rt = Runtime(inner);
                    let work = rt.try_progress().unwrap_or(0);
                    drop(rt);
                    if work == 0 {
                        std::thread::sleep(Duration::from_micros(20));
                    }
                })
                .expect("spawn progress thread");
            threads.push(h);
        }
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.0.config
    }

    pub fn registry(&self) -> &Arc<DeviceRegistry> {
        &self.0.registry
    }

    pub fn clock(&self) -> &Clock {
        self.0.registry.clock()
    }

    pub fn now(&self) -> f64 {
        self.0.registry.now()
    }

    /// Re-reads the device list after devices were registered late.
    pub fn refresh_devices(&self) {
        self.0.state.lock().refresh_devices(&self.0.registry);
    }

    pub fn set_co_progress(&self, f: Option<CoProgress>) {
        *self.0.co_progress.write() = f;
    }

    // ---- kernels -----------------------------------------------------------

    pub fn register_kernel(&self, def: KernelDefinition) -> Result<KernelRef> {
        self.0.kernels.write().register(def)
    }

    pub fn kernel(&self, name: &str) -> Option<KernelRef> {
        self.0.kernels.read().lookup(name)
    }

    // ---- objects -----------------------------------------------------------

    fn new_record(&self, desc: &ObjectDesc) -> Box<ObjectRecord> {
        let id = self.0.next_object.fetch_add(1, Ordering::Relaxed);
        let mut rec = pool::take::<ObjectRecord>();
        rec.reset(id, desc.size_bytes());
        rec
    }

    /// Creates an object with every copy ABSENT. No memory is reserved until
    /// the object is first used.
    pub fn create_object(&self, dims: &[u64], elem_size: u64) -> Result<ObjectHandle> {
        let desc = ObjectDesc::new(dims, elem_size)?;
        let rec = self.new_record(&desc);
        let id = rec.id;
        self.0.state.lock().insert_object(rec);
        Ok(ObjectHandle::new(id, desc, &self.0.drops))
    }

    pub fn create<T: Pod>(&self, dims: &[u64]) -> Result<ObjectHandle> {
        self.create_object(dims, std::mem::size_of::<T>() as u64)
    }

    /// Creates an object whose only VALID copy is a host copy of `data`.
    pub fn create_object_from_host(&self, desc: ObjectDesc, data: &[u8]) -> Result<ObjectHandle> {
        if data.len() as u64 != desc.size_bytes() {
            return Err(CoreError::SizeMismatch {
                expected: desc.size_bytes(),
                got: data.len() as u64,
            });
        }
        let mut rec = self.new_record(&desc);
        let buf = self.0.registry.pinned_pool().allocate(data.len());
        buf.write().as_mut_slice().copy_from_slice(data);
        rec.host = Some(buf);
        rec.host_state = Some(CopyState::Valid);
        let id = rec.id;
        self.0.state.lock().insert_object(rec);
        Ok(ObjectHandle::new(id, desc, &self.0.drops))
    }

    /// Creates an object whose only VALID copy lives on `device`, written
    /// directly into device memory (lent memory if given, else the pool).
    pub fn create_object_on_device(
        &self,
        desc: ObjectDesc,
        device: DeviceId,
        data: &[u8],
        lend: Option<LentAllocation>,
    ) -> Result<ObjectHandle> {
        if data.len() as u64 != desc.size_bytes() {
            return Err(CoreError::SizeMismatch {
                expected: desc.size_bytes(),
                got: data.len() as u64,
            });
        }
        let rec = self.new_record(&desc);
        let id = rec.id;
        let reg = &self.0.registry;
        let mut st = self.0.state.lock();
        st.insert_object(rec);
        let placed = st.ensure_device_alloc(reg, id, device, &[id], lend);
        match placed {
            Ok(true) => {}
            Ok(false) | Err(_) => {
                st.objects.remove(&id);
                return Err(match placed {
                    Err(e) => e,
                    _ => CoreError::Unsatisfiable {
                        device,
                        needed: desc.size_bytes(),
                    },
                });
            }
        }
        let r = st.objects.get_mut(&id).expect("object");
        let copy = r.copies.get_mut(&device).expect("copy");
        reg.device(device)?.write_direct(&copy.alloc, 0, data)?;
        copy.state = CopyState::Valid;
        drop(st);
        Ok(ObjectHandle::new(id, desc, &self.0.drops))
    }

    /// Requests destruction. Later uses of any handle fail; memory is
    /// released once every operation that references the object finished.
    /// Idempotent.
    pub fn destroy_object(&self, h: &ObjectHandle) -> Result<()> {
        self.0.state.lock().request_destroy(h.id());
        Ok(())
    }

    pub fn object_exists(&self, id: ObjectId) -> bool {
        self.0.state.lock().objects.contains_key(&id)
    }

    pub fn live_objects(&self) -> usize {
        self.0.state.lock().objects.len()
    }

    pub fn copy_states(&self, h: &ObjectHandle) -> Result<CopyStates> {
        let mut st = self.0.state.lock();
        let r = st.objects.get_mut(&h.id()).ok_or(CoreError::UnknownObject(h.id()))?;
        r.settle_fills();
        Ok(r.snapshot())
    }

    /// Device memory currently held by the object on `device`, if any.
    pub fn device_allocation(&self, h: &ObjectHandle, device: DeviceId) -> Option<hrt_device::DeviceAllocation> {
        let st = self.0.state.lock();
        st.objects.get(&h.id())?.copies.get(&device).map(|c| c.alloc)
    }

    /// Frees at least `needed` bytes on `device` by evicting idle copies in
    /// least-recently-used order; returns the bytes freed.
    pub fn evict_lru(&self, device: DeviceId, needed: u64) -> Result<u64> {
        self.0.state.lock().evict_lru(&self.0.registry, device, needed, &[])
    }

    // ---- tasks ---------------------------------------------------------------

    pub fn task(&self) -> TaskBuilder<'_> {
        TaskBuilder::new(self)
    }

    pub(crate) fn next_task_id(&self) -> TaskId {
        self.0.next_task.fetch_add(1, Ordering::Relaxed)
    }

    /// Adds an explicit edge: `task` will not start before `prerequisite`
    /// completes. The prerequisite may not have been submitted yet.
    pub fn add_dependency(&self, task: &mut HeteroTask, prerequisite: TaskId) -> Result<()> {
        if prerequisite == task.id {
            return Err(CoreError::SelfDependency(task.id));
        }
        if !task.deps.contains(&prerequisite) {
            task.deps.push(prerequisite);
            self.0.state.lock().explicit.entry(task.id).or_default().push(prerequisite);
        }
        Ok(())
    }

    pub fn submit(&self, task: HeteroTask) -> Result<TaskHandle> {
        let def = self
            .0
            .kernels
            .read()
            .get(task.kernel)
            .ok_or_else(|| CoreError::UnknownKernel(format!("#{}", task.kernel.index())))?;
        if !def.supports(task.device_type) {
            return Err(CoreError::KernelUnavailable {
                kernel: def.name().to_string(),
                device_type: task.device_type,
            });
        }
        for (i, (h, _)) in task.args.iter().enumerate() {
            if task.args[..i].iter().any(|(o, _)| o.id() == h.id()) {
                return Err(CoreError::DuplicateArgument(h.id()));
            }
        }
        let id = task.id;
        let mut op = pool::take::<Op>();
        op.reset(
            id,
            OpKind::Kernel {
                def,
                geometry: task.geometry,
                device_type: task.device_type,
                scratch: task.scratch,
            },
        );
        op.args.extend(task.args.iter().map(|(h, m)| (h.id(), *m)));
        op.explicit.extend_from_slice(&task.deps);
        let mut st = self.0.state.lock();
        let check = (|| {
            if st.devices_of(task.device_type).is_empty() {
                return Err(CoreError::NoDevice(task.device_type));
            }
            for (h, _) in &task.args {
                st.live_object(h.id())?;
            }
            if task.deps.contains(&id) {
                return Err(CoreError::SelfDependency(id));
            }
            if task.deps.iter().any(|&d| st.reaches(d, id)) {
                return Err(CoreError::Cycle(id));
            }
            Ok(())
        })();
        if let Err(e) = check {
            st.explicit.remove(&id);
            drop(st);
            op.kind = OpKind::Empty;
            pool::give(op);
            return Err(e);
        }
        if !task.deps.is_empty() {
            st.explicit.insert(id, task.deps.clone());
        }
        for (h, _) in &task.args {
            st.objects.get_mut(&h.id()).expect("checked").ref_count += 1;
        }
        st.stats.tasks_submitted += 1;
        st.submitted.insert(id);
        drop(st);
        self.enqueue_op(op);
        Ok(TaskHandle { id, rt: self.clone() })
    }

    fn enqueue_op(&self, op: Box<Op>) {
        self.0.submissions.lock().push_back(op);
        self.0.pending.fetch_add(1, Ordering::Release);
    }

    /// Registers a runtime pseudo-task on one object.
    fn submit_access(&self, h: &ObjectHandle, mode: AccessMode, kind: OpKind) -> Result<TaskId> {
        let id = self.next_task_id();
        let mut op = pool::take::<Op>();
        op.reset(id, kind);
        op.args.push((h.id(), mode));
        let mut st = self.0.state.lock();
        if let Err(e) = st.live_object(h.id()) {
            drop(st);
            op.kind = OpKind::Empty;
            pool::give(op);
            return Err(e);
        }
        st.objects.get_mut(&h.id()).expect("checked").ref_count += 1;
        st.submitted.insert(id);
        drop(st);
        self.enqueue_op(op);
        Ok(id)
    }

    pub fn task_state(&self, id: TaskId) -> Option<TaskState> {
        self.0.state.lock().task_state(id)
    }

    pub fn stats(&self) -> RuntimeStats {
        self.0.state.lock().stats
    }

    /// Tasks and pseudo-tasks submitted and not yet finished.
    pub fn in_flight(&self) -> usize {
        self.0.state.lock().in_flight()
    }

    /// Replaces the placement policy. Only allowed while nothing is in flight.
    pub fn set_scheduler(&self, s: Box<dyn Scheduler>) -> Result<()> {
        let mut st = self.0.state.lock();
        if st.in_flight() > 0 {
            return Err(CoreError::InFlight);
        }
        st.scheduler = Some(s);
        Ok(())
    }

    pub fn scheduler_name(&self) -> &'static str {
        self.0.state.lock().scheduler.as_ref().map_or("none", |s| s.name())
    }

    // ---- host access ---------------------------------------------------------

    /// Asks for a host view of the object. Reading makes the host copy VALID
    /// first; write-only access moves no data. A conflicting lease already
    /// held or requested on the object is an error.
    pub fn request_data(&self, h: &ObjectHandle, read: bool, write: bool) -> Result<HostFuture> {
        let mode = AccessMode::from_flags(read, write)?;
        {
            let mut st = self.0.state.lock();
            let r = st.live_object(h.id())?;
            let next = match (r.lease, mode) {
                (HostLease::None, AccessMode::Read) => HostLease::Read(1),
                (HostLease::None, _) => HostLease::Write,
                (HostLease::Read(n), AccessMode::Read) => HostLease::Read(n + 1),
                _ => return Err(CoreError::LeaseConflict(h.id())),
            };
            st.objects.get_mut(&h.id()).expect("checked").lease = next;
        }
        let kind = OpKind::Access {
            target: AccessTarget::Host,
            lease: true,
            auto_release: false,
            lend: None,
        };
        let id = match self.submit_access(h, mode, kind) {
            Ok(id) => id,
            Err(e) => {
                let mut st = self.0.state.lock();
                if let Some(r) = st.objects.get_mut(&h.id()) {
                    r.lease = match r.lease {
                        HostLease::Read(n) if n > 1 => HostLease::Read(n - 1),
                        _ => HostLease::None,
                    };
                }
                return Err(e);
            }
        };
        Ok(HostFuture {
            id,
            handle: h.clone(),
            writable: mode.writes(),
            rt: self.clone(),
        })
    }

    /// Ends the oldest granted host lease on the object. A writing lease
    /// leaves the host copy as the only VALID one (device copies went STALE
    /// when it was granted).
    pub fn release(&self, h: &ObjectHandle) -> Result<()> {
        let mut st = self.0.state.lock();
        let mut granted = None;
        let mut pending = false;
        let mut ids: Vec<_> = st
            .ops
            .values()
            .filter(|op| {
                matches!(op.kind, OpKind::Access { lease: true, .. }) && op.args[0].0 == h.id()
            })
            .map(|op| (op.id, op.state(), op.args[0].1))
            .collect();
        ids.sort_unstable_by_key(|x| x.0);
        for (id, state, mode) in ids {
            if state == TaskState::Running {
                granted = Some((id, mode));
                break;
            }
            pending = true;
        }
        match granted {
            Some((id, _)) => {
                st.complete(&self.0.registry, id, false);
                Ok(())
            }
            None if pending => Err(CoreError::LeaseNotGranted(h.id())),
            None => {
                let leased = st.objects.get(&h.id()).is_some_and(|r| r.lease != HostLease::None);
                Err(if leased {
                    CoreError::LeaseNotGranted(h.id())
                } else {
                    CoreError::NoLease(h.id())
                })
            }
        }
    }

    /// Copies the object's current contents into `region` at `offset`
    /// without disturbing copy states.
    pub fn copy_to_region(&self, h: &ObjectHandle, region: &HostBuffer, offset: u64) -> Result<TaskHandle> {
        let needed = offset + h.size_bytes();
        if needed > region.len() as u64 {
            return Err(CoreError::RegionTooSmall {
                needed,
                available: region.len() as u64,
            });
        }
        let id = self.submit_access(
            h,
            AccessMode::Read,
            OpKind::CopyOut {
                region: region.clone(),
                offset,
            },
        )?;
        Ok(TaskHandle { id, rt: self.clone() })
    }

    /// Makes a VALID copy resident on `device`. A lent allocation is used for
    /// the copy if the object has none there yet, otherwise handed back.
    pub fn prefetch(&self, h: &ObjectHandle, device: DeviceId, lend: Option<LentAllocation>) -> Result<TaskHandle> {
        self.0.registry.device(device)?;
        let id = self.submit_access(
            h,
            AccessMode::Read,
            OpKind::Access {
                target: AccessTarget::Device(device),
                lease: false,
                auto_release: true,
                lend,
            },
        )?;
        Ok(TaskHandle { id, rt: self.clone() })
    }

    /// Ordered access for a communication layer: waits for conflicting
    /// operations, then makes the object available at `target` until
    /// [`AccessGrant::release`].
    pub fn acquire(&self, h: &ObjectHandle, mode: AccessMode, target: AccessTarget) -> Result<AccessGrant> {
        if let AccessTarget::Device(d) = target {
            self.0.registry.device(d)?;
        }
        if target == AccessTarget::AnyValid && mode.writes() {
            return Err(CoreError::InvalidAccess);
        }
        let id = self.submit_access(
            h,
            mode,
            OpKind::Access {
                target,
                lease: false,
                auto_release: false,
                lend: None,
            },
        )?;
        Ok(AccessGrant {
            id,
            handle: h.clone(),
            mode,
            rt: self.clone(),
        })
    }

    fn op_place(&self, id: TaskId) -> Option<Place> {
        self.0.state.lock().ops.get(&id).and_then(|o| o.place)
    }

    // ---- progress --------------------------------------------------------------

    fn try_progress(&self) -> Option<usize> {
        let guard = self.0.progress_lock.try_lock()?;
        let w = self.progress_locked();
        drop(guard);
        Some(w)
    }

    /// One pass of the progress engine. Returns a measure of the work done;
    /// zero means nothing can move until time passes.
    pub fn progress(&self) -> usize {
        let _g = self.0.progress_lock.lock();
        self.progress_locked()
    }

    fn progress_locked(&self) -> usize {
        let reg = &*self.0.registry;
        let mut work = 0;
        let subs: Vec<Box<Op>> = if self.0.pending.load(Ordering::Acquire) > 0 {
            let mut q = self.0.submissions.lock();
            self.0.pending.store(0, Ordering::Release);
            q.drain(..).collect()
        } else {
            Vec::new()
        };
        let drops: Vec<ObjectId> = std::mem::take(&mut *self.0.drops.lock());
        let mut st = self.0.state.lock();
        for op in subs {
            st.admit(reg, op);
            work += 1;
        }
        for o in drops {
            st.request_destroy(o);
        }
        work += st.recheck_blocked(reg);
        work += st.issue(reg);
        let (w, launches) = st.advance_issued(reg);
        work += w;
        drop(st);
        let results: Vec<_> = launches
            .into_iter()
            .map(|l| (l.op, reg.enqueue_kernel(l.device, l.launch)))
            .collect();
        let mut st = self.0.state.lock();
        for (op, r) in results {
            match r {
                Ok(token) => st.attach_token(op, token),
                Err(e) => st.fail(reg, op, e.to_string()),
            }
        }
        work += st.retire(reg);
        work += st.reap(reg);
        st.prune_history();
        work
    }

    fn has_pending(&self) -> bool {
        self.0.pending.load(Ordering::Acquire) > 0 || !self.0.drops.lock().is_empty()
    }

    /// Drives progress (and, under the virtual clock, time) until `done`
    /// holds. Fails if nothing can ever make it hold.
    pub fn run_until(&self, mut done: impl FnMut() -> bool) -> Result<()> {
        let mut idle_spins = 0u32;
        loop {
            if done() {
                return Ok(());
            }
            let mut work = self.progress();
            if work == 0 {
                if let Some(co) = self.0.co_progress.read().clone() {
                    work += co();
                }
            }
            if work > 0 || self.has_pending() {
                idle_spins = 0;
                continue;
            }
            if done() {
                return Ok(());
            }
            match self.clock() {
                Clock::Virtual(v) => {
                    if v.advance_to_next().is_none() {
                        return Err(CoreError::Stalled(
                            "no runnable work and no pending events".into(),
                        ));
                    }
                }
                Clock::Wall(_) => {
                    let st = self.0.state.lock();
                    let idle = !st.has_pending_work();
                    drop(st);
                    if idle && self.0.co_progress.read().is_none() {
                        idle_spins += 1;
                        if idle_spins > 1000 {
                            return Err(CoreError::Stalled("runtime is idle".into()));
                        }
                    }
                    if idle_spins > 64 {
                        std::thread::sleep(Duration::from_micros(50));
                    } else {
                        std::thread::yield_now();
                    }
                }
            }
        }
    }

    pub fn wait(&self, t: &TaskHandle) -> Result<()> {
        self.run_until(|| self.task_state(t.id).is_some_and(|s| s.is_terminal()))?;
        match self.0.state.lock().task_error(t.id) {
            None => Ok(()),
            Some(e) => Err(CoreError::TaskFailed(e)),
        }
    }

    /// Waits until every submitted operation has finished, except granted
    /// leases and grants that only their holder can release. Pending copy
    /// fills, such as eviction write-backs, count as unfinished.
    pub fn wait_all(&self) -> Result<()> {
        self.run_until(|| {
            let mut st = self.0.state.lock();
            st.submitted.is_empty()
                && st.ops.values().all(|o| {
                    o.state() == TaskState::Running && matches!(o.kind, OpKind::Access { .. })
                })
                && !st.fills_pending()
        })
    }
}

/// A task assembled by [`TaskBuilder`], not yet submitted.
#[derive(Debug)]
pub struct HeteroTask {
    pub(crate) id: TaskId,
    pub(crate) kernel: KernelRef,
    pub(crate) args: Vec<(ObjectHandle, AccessMode)>,
    pub(crate) geometry: ThreadGeometry,
    pub(crate) device_type: DeviceType,
    pub(crate) scratch: usize,
    pub(crate) deps: Vec<TaskId>,
}

impl HeteroTask {
    pub fn id(&self) -> TaskId {
        self.id
    }
}

/// Handle to a submitted task or runtime operation.
#[derive(Clone)]
pub struct TaskHandle {
    id: TaskId,
    rt: Runtime,
}

impl fmt::Debug for TaskHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaskHandle({})", self.id)
    }
}

impl TaskHandle {
    pub fn id(&self) -> TaskId {
        self.id
    }

    pub fn state(&self) -> TaskState {
        self.rt.task_state(self.id).unwrap_or(TaskState::Submitted)
    }

    pub fn is_done(&self) -> bool {
        self.state().is_terminal()
    }

    pub fn error(&self) -> Option<String> {
        self.rt.0.state.lock().task_error(self.id)
    }

    pub fn wait(&self) -> Result<()> {
        self.rt.wait(self)
    }
}

/// Pending host lease.
pub struct HostFuture {
    id: TaskId,
    handle: ObjectHandle,
    writable: bool,
    rt: Runtime,
}

impl HostFuture {
    pub fn id(&self) -> TaskId {
        self.id
    }

    pub fn is_ready(&self) -> bool {
        self.rt.task_state(self.id) == Some(TaskState::Running)
    }

    /// Drives the runtime until the lease is granted.
    pub fn wait(self) -> Result<HostView> {
        let rt = self.rt.clone();
        rt.run_until(|| {
            rt.task_state(self.id)
                .is_some_and(|s| s == TaskState::Running || s.is_terminal())
        })?;
        let st = rt.0.state.lock();
        if let Some(e) = st.task_error(self.id) {
            return Err(CoreError::TaskFailed(e));
        }
        let buffer = st
            .object(self.handle.id())?
            .host
            .clone()
            .expect("granted lease has a host buffer");
        Ok(HostView {
            buffer,
            writable: self.writable,
        })
    }
}

/// Host-side view of an object under a granted lease.
pub struct HostView {
    buffer: HostBuffer,
    writable: bool,
}

impl HostView {
    pub fn is_writable(&self) -> bool {
        self.writable
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn read<R>(&self, f: impl FnOnce(&[u8]) -> R) -> R {
        f(self.buffer.read().as_slice())
    }

    pub fn to_vec<T: Pod>(&self) -> Vec<T> {
        self.read(|b| {
            let n = b.len() / std::mem::size_of::<T>();
            let mut v = vec![T::zeroed(); n];
            bytemuck::cast_slice_mut::<T, u8>(&mut v).copy_from_slice(&b[..n * std::mem::size_of::<T>()]);
            v
        })
    }

    /// Mutable access. Panics on a read-only lease.
    pub fn write<R>(&self, f: impl FnOnce(&mut [u8]) -> R) -> R {
        assert!(self.writable, "write through a read-only host lease");
        f(self.buffer.write().as_mut_slice())
    }

    pub fn copy_from<T: Pod>(&self, data: &[T]) {
        self.write(|b| b.copy_from_slice(bytemuck::cast_slice(data)))
    }
}

/// Ordered access granted to a communication layer.
pub struct AccessGrant {
    id: TaskId,
    handle: ObjectHandle,
    mode: AccessMode,
    rt: Runtime,
}

impl fmt::Debug for AccessGrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccessGrant")
            .field("id", &self.id)
            .field("object", &self.handle.id())
            .field("mode", &self.mode)
            .finish()
    }
}

impl AccessGrant {
    pub fn id(&self) -> TaskId {
        self.id
    }

    pub fn handle(&self) -> &ObjectHandle {
        &self.handle
    }

    pub fn mode(&self) -> AccessMode {
        self.mode
    }

    pub fn state(&self) -> TaskState {
        self.rt.task_state(self.id).unwrap_or(TaskState::Submitted)
    }

    /// Granted (or failed).
    pub fn is_ready(&self) -> bool {
        matches!(self.state(), TaskState::Running | TaskState::Failed)
    }

    pub fn error(&self) -> Option<String> {
        self.rt.0.state.lock().task_error(self.id)
    }

    pub fn place(&self) -> Option<Place> {
        self.rt.op_place(self.id)
    }

    /// Host<->device copies the runtime made to satisfy this grant.
    pub fn transfers(&self) -> u32 {
        self.rt.0.state.lock().ops.get(&self.id).map_or(0, |o| o.transfers)
    }

    /// Where the object can be read or written while the grant is held.
    pub fn location(&self) -> Option<Location> {
        let st = self.rt.0.state.lock();
        let op = st.ops.get(&self.id)?;
        if op.state() != TaskState::Running {
            return None;
        }
        let r = st.objects.get(&self.handle.id())?;
        match op.place? {
            Place::Host => r.host.as_ref().map(Location::host),
            Place::Device(d) => r.copies.get(&d).map(|c| Location::device(c.alloc)),
        }
    }

    pub fn wait(&self) -> Result<Location> {
        self.rt.run_until(|| self.is_ready())?;
        if let Some(e) = self.error() {
            return Err(CoreError::TaskFailed(e));
        }
        self.location().ok_or(CoreError::UnknownTask(self.id))
    }

    /// Ends the access. `written` applies the write effect at the granted
    /// place; without it copy states are left alone.
    pub fn release(self, written: bool) -> Result<()> {
        let mut st = self.rt.0.state.lock();
        match st.ops.get(&self.id).map(|o| o.state()) {
            Some(TaskState::Running) => {
                st.complete(&self.rt.0.registry, self.id, written && self.mode.writes());
                Ok(())
            }
            Some(_) => Err(CoreError::LeaseNotGranted(self.handle.id())),
            None => Err(CoreError::UnknownTask(self.id)),
        }
    }
}
