//! Runtime state and the progress steps that operate on it. Everything here
//! runs under the runtime's state lock.

use std::collections::{HashMap, HashSet, VecDeque};

use hrt_device::{
    DeviceError, DeviceId, DeviceRegistry, DeviceType, Direction, KernelArg, KernelLaunch,
    Location, TraceEvent,
};

use crate::deps::DependencyTracker;
use crate::object::{DeviceCopy, HostLease, ObjectRecord};
use crate::scheduler::{ReadyTask, SchedContext, Scheduler};
use crate::task::{AccessTarget, Op, OpKind};
use crate::{pool, CopyState, CoreError, ObjectId, Place, Result, TaskId, TaskState};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RuntimeStats {
    pub tasks_submitted: u64,
    pub tasks_completed: u64,
    pub tasks_failed: u64,
    pub host_to_device: u64,
    pub device_to_host: u64,
    pub evictions: u64,
    pub objects_created: u64,
    pub objects_destroyed: u64,
}

/// A kernel ready to hand to its device, built under the lock and enqueued
/// after it is released.
pub(crate) struct PendingLaunch {
    pub op: TaskId,
    pub device: DeviceId,
    pub launch: KernelLaunch,
}

pub(crate) struct State {
    pub objects: HashMap<ObjectId, Box<ObjectRecord>>,
    pub ops: HashMap<TaskId, Box<Op>>,
    pub finished: HashMap<TaskId, Option<String>>,
    pub submitted: HashSet<TaskId>,
    blocked: Vec<TaskId>,
    ready_access: VecDeque<TaskId>,
    deferred: Vec<ReadyTask>,
    issued: Vec<TaskId>,
    running: Vec<TaskId>,
    pub scheduler: Option<Box<dyn Scheduler>>,
    tracker: DependencyTracker,
    pub explicit: HashMap<TaskId, Vec<TaskId>>,
    outstanding: HashMap<DeviceId, usize>,
    stream_rr: HashMap<DeviceId, usize>,
    gpu_rr: usize,
    lru: u64,
    doomed: Vec<ObjectId>,
    pub stats: RuntimeStats,
    gpus: Vec<DeviceId>,
    hosts: Vec<DeviceId>,
}

struct Ctx<'a> {
    st: &'a State,
}

impl SchedContext for Ctx<'_> {
    fn devices(&self, ty: DeviceType) -> Vec<DeviceId> {
        self.st.devices_of(ty).to_vec()
    }

    fn outstanding(&self, device: DeviceId) -> usize {
        self.st.outstanding.get(&device).copied().unwrap_or(0)
    }

    fn valid_bytes(&self, task: TaskId, device: DeviceId) -> u64 {
        let Some(op) = self.st.ops.get(&task) else {
            return 0;
        };
        let place = match op.device_type() {
            Some(DeviceType::Host) => Place::Host,
            _ => Place::Device(device),
        };
        op.args
            .iter()
            .filter_map(|(o, _)| self.st.objects.get(o))
            .filter(|r| r.state_at(place) == CopyState::Valid)
            .map(|r| r.size)
            .sum()
    }
}

impl State {
    pub fn new(scheduler: Box<dyn Scheduler>, registry: &DeviceRegistry) -> Self {
        Self {
            objects: HashMap::new(),
            ops: HashMap::new(),
            finished: HashMap::new(),
            submitted: HashSet::new(),
            blocked: Vec::new(),
            ready_access: VecDeque::new(),
            deferred: Vec::new(),
            issued: Vec::new(),
            running: Vec::new(),
            scheduler: Some(scheduler),
            tracker: DependencyTracker::new(),
            explicit: HashMap::new(),
            outstanding: HashMap::new(),
            stream_rr: HashMap::new(),
            gpu_rr: 0,
            lru: 0,
            doomed: Vec::new(),
            stats: RuntimeStats::default(),
            gpus: registry.ids_of_type(DeviceType::GpuSim),
            hosts: registry.ids_of_type(DeviceType::Host),
        }
    }

    pub fn refresh_devices(&mut self, registry: &DeviceRegistry) {
        self.gpus = registry.ids_of_type(DeviceType::GpuSim);
        self.hosts = registry.ids_of_type(DeviceType::Host);
    }

    pub fn devices_of(&self, ty: DeviceType) -> &[DeviceId] {
        match ty {
            DeviceType::GpuSim => &self.gpus,
            DeviceType::Host => &self.hosts,
        }
    }

    pub fn in_flight(&self) -> usize {
        self.ops.len() + self.submitted.len()
    }

    pub fn task_state(&self, id: TaskId) -> Option<TaskState> {
        if let Some(op) = self.ops.get(&id) {
            return Some(op.state());
        }
        if let Some(f) = self.finished.get(&id) {
            return Some(if f.is_none() { TaskState::Complete } else { TaskState::Failed });
        }
        self.submitted.contains(&id).then_some(TaskState::Submitted)
    }

    pub fn task_error(&self, id: TaskId) -> Option<String> {
        self.finished.get(&id).cloned().flatten()
    }

    fn trace_task(&self, registry: &DeviceRegistry, op: &Op) {
        let trace = registry.trace();
        if op.is_kernel() && trace.is_enabled() {
            trace.record(TraceEvent::Task {
                task_id: op.id,
                state: op.state().as_str().to_string(),
                device: op.device,
                virtual_time: registry.now(),
            });
        }
    }

    fn set_state(&mut self, registry: &DeviceRegistry, id: TaskId, s: TaskState) {
        if let Some(op) = self.ops.get_mut(&id) {
            op.state = Some(s);
        }
        if let Some(op) = self.ops.get(&id) {
            self.trace_task(registry, op);
        }
    }

    pub fn object(&self, id: ObjectId) -> Result<&ObjectRecord> {
        self.objects.get(&id).map(|b| &**b).ok_or(CoreError::UnknownObject(id))
    }

    /// Object usable by new operations.
    pub fn live_object(&self, id: ObjectId) -> Result<&ObjectRecord> {
        let r = self.object(id)?;
        if r.destroy_requested {
            return Err(CoreError::ObjectDestroyed(id));
        }
        Ok(r)
    }

    pub fn insert_object(&mut self, rec: Box<ObjectRecord>) {
        self.stats.objects_created += 1;
        self.objects.insert(rec.id, rec);
    }

    /// True if `from` reaches `to` through explicit edges or inferred edges
    /// of operations already in flight.
    pub fn reaches(&self, from: TaskId, to: TaskId) -> bool {
        let mut stack = vec![from];
        let mut seen = HashSet::new();
        while let Some(t) = stack.pop() {
            if t == to {
                return true;
            }
            if !seen.insert(t) || self.finished.contains_key(&t) {
                continue;
            }
            if let Some(e) = self.explicit.get(&t) {
                stack.extend(e.iter().copied());
            }
            if let Some(op) = self.ops.get(&t) {
                stack.extend(op.deps.iter().copied());
            }
        }
        false
    }

    // ---- step 1: dependency inference -----------------------------------

    pub fn admit(&mut self, registry: &DeviceRegistry, mut op: Box<Op>) {
        self.submitted.remove(&op.id);
        let inferred = self.tracker.register(op.id, &op.args);
        let mut deps: Vec<TaskId> = Vec::with_capacity(inferred.len() + op.explicit.len());
        for d in inferred.into_iter().chain(op.explicit.iter().copied()) {
            if !deps.contains(&d) && self.finished.get(&d).is_none_or(|e| e.is_some()) {
                deps.push(d);
            }
        }
        let id = op.id;
        let cycle = deps.iter().any(|&d| self.reaches(d, id));
        op.deps = deps;
        op.state = Some(TaskState::Blocked);
        self.ops.insert(id, op);
        if cycle {
            self.fail(registry, id, CoreError::Cycle(id).to_string());
            return;
        }
        self.trace_task(registry, &self.ops[&id]);
        self.check_blocked(registry, id);
    }

    /// Moves a blocked op forward if its prerequisites allow. Returns whether
    /// it left the blocked state.
    fn check_blocked(&mut self, registry: &DeviceRegistry, id: TaskId) -> bool {
        let Some(op) = self.ops.get_mut(&id) else {
            return true;
        };
        let finished = &self.finished;
        let mut failed = None;
        op.deps.retain(|d| match finished.get(d) {
            Some(None) => false,
            Some(Some(e)) => {
                failed.get_or_insert_with(|| format!("prerequisite {d} failed: {e}"));
                false
            }
            None => true,
        });
        if let Some(e) = failed {
            self.fail(registry, id, e);
            return true;
        }
        if !op.deps.is_empty() {
            if !self.blocked.contains(&id) {
                self.blocked.push(id);
            }
            return false;
        }
        self.make_runnable(registry, id);
        true
    }

    fn make_runnable(&mut self, registry: &DeviceRegistry, id: TaskId) {
        self.blocked.retain(|&b| b != id);
        self.set_state(registry, id, TaskState::Runnable);
        let op = &self.ops[&id];
        match op.device_type() {
            Some(device_type) => self
                .scheduler
                .as_mut()
                .expect("scheduler present")
                .push(ReadyTask { id, device_type }),
            None => self.ready_access.push_back(id),
        }
    }

    // ---- step 2: blocked recheck -----------------------------------------

    pub fn recheck_blocked(&mut self, registry: &DeviceRegistry) -> usize {
        let ids = std::mem::take(&mut self.blocked);
        let mut moved = 0;
        for id in ids {
            if self.check_blocked(registry, id) {
                moved += 1;
            }
        }
        moved
    }

    // ---- step 3: issue ---------------------------------------------------

    fn register_active(&mut self, id: TaskId) {
        self.lru += 1;
        let tick = self.lru;
        let args = self.ops[&id].args.clone();
        for (o, _) in args {
            if let Some(r) = self.objects.get_mut(&o) {
                r.active.push(id);
                r.lru_tick = tick;
            }
        }
    }

    fn unregister_active(&mut self, id: TaskId) {
        let args = match self.ops.get(&id) {
            Some(op) => op.args.clone(),
            None => return,
        };
        for (o, _) in args {
            if let Some(r) = self.objects.get_mut(&o) {
                r.active.retain(|&a| a != id);
            }
        }
    }

    pub fn issue(&mut self, registry: &DeviceRegistry) -> usize {
        let mut work = 0;
        let n = self.ready_access.len();
        for _ in 0..n {
            let id = self.ready_access.pop_front().expect("len checked");
            match self.issue_access(registry, id) {
                Ok(true) => work += 1,
                Ok(false) => self.ready_access.push_back(id),
                Err(e) => {
                    self.fail(registry, id, e.to_string());
                    work += 1;
                }
            }
        }
        let deferred = std::mem::take(&mut self.deferred);
        {
            let sched = self.scheduler.as_mut().expect("scheduler present");
            for t in deferred {
                sched.push(t);
            }
        }
        let mut retry = Vec::new();
        loop {
            let mut sched = self.scheduler.take().expect("scheduler present");
            let popped = sched.pop(&Ctx { st: self });
            self.scheduler = Some(sched);
            let Some((id, device)) = popped else { break };
            let Some(ty) = self.ops.get(&id).and_then(|o| o.device_type()) else {
                continue;
            };
            match self.issue_kernel(registry, id, device) {
                Ok(true) => work += 1,
                Ok(false) => retry.push(ReadyTask { id, device_type: ty }),
                Err(e) => {
                    self.fail(registry, id, e.to_string());
                    work += 1;
                }
            }
        }
        self.deferred = retry;
        work
    }

    fn issue_kernel(&mut self, registry: &DeviceRegistry, id: TaskId, device: DeviceId) -> Result<bool> {
        let op = self.ops.get_mut(&id).expect("issued op exists");
        op.device = Some(device);
        let place = op.kernel_place().expect("kernel op");
        let args = op.args.clone();
        self.register_active(id);
        if let Place::Device(d) = place {
            let exclude: Vec<ObjectId> = args.iter().map(|a| a.0).collect();
            for &(o, _) in &args {
                if !self.ensure_device_alloc(registry, o, d, &exclude, None)? {
                    self.unregister_active(id);
                    self.ops.get_mut(&id).expect("op").device = None;
                    return Ok(false);
                }
            }
        }
        let streams = registry.device(device)?.descriptor().compute_stream_count;
        let rr = self.stream_rr.entry(device).or_default();
        let stream = *rr % streams.max(1);
        *rr += 1;
        self.ops.get_mut(&id).expect("op").stream = stream;
        *self.outstanding.entry(device).or_default() += 1;
        self.set_state(registry, id, TaskState::Issued);
        self.issued.push(id);
        Ok(true)
    }

    fn issue_access(&mut self, registry: &DeviceRegistry, id: TaskId) -> Result<bool> {
        let op = &self.ops[&id];
        let (obj, _) = op.args[0];
        let place = match &op.kind {
            OpKind::Access { target, lend, .. } => {
                let lend = lend.clone();
                match *target {
                    AccessTarget::Host => Some(Place::Host),
                    AccessTarget::AnyValid => None,
                    AccessTarget::Device(d) => {
                        if !self.ensure_device_alloc(registry, obj, d, &[obj], lend)? {
                            return Ok(false);
                        }
                        Some(Place::Device(d))
                    }
                    AccessTarget::AnyDevice => {
                        let d = self.pick_device(obj)?;
                        if !self.ensure_device_alloc(registry, obj, d, &[obj], lend)? {
                            return Ok(false);
                        }
                        Some(Place::Device(d))
                    }
                }
            }
            OpKind::CopyOut { .. } => None,
            _ => unreachable!("kernels are issued by the scheduler"),
        };
        if place == Some(Place::Host) {
            self.ensure_host_buffer(registry, obj);
        }
        let op = self.ops.get_mut(&id).expect("op");
        op.place = place;
        op.device = match place {
            Some(Place::Device(d)) => Some(d),
            _ => None,
        };
        self.register_active(id);
        self.set_state(registry, id, TaskState::Issued);
        self.issued.push(id);
        Ok(true)
    }

    fn pick_device(&mut self, obj: ObjectId) -> Result<DeviceId> {
        let r = self.object(obj)?;
        if let Some(d) = r.valid_device() {
            return Ok(d);
        }
        if let Some(&d) = r.copies.keys().next() {
            return Ok(d);
        }
        if self.gpus.is_empty() {
            return Err(CoreError::NoDevice(DeviceType::GpuSim));
        }
        let d = self.gpus[self.gpu_rr % self.gpus.len()];
        self.gpu_rr += 1;
        Ok(d)
    }

    // ---- step 4: make issued ops ready -----------------------------------

    pub fn advance_issued(&mut self, registry: &DeviceRegistry) -> (usize, Vec<PendingLaunch>) {
        let ids = std::mem::take(&mut self.issued);
        let mut launches = Vec::new();
        let mut work = 0;
        let mut still = Vec::with_capacity(ids.len());
        for id in ids {
            let before = self.stats.host_to_device + self.stats.device_to_host;
            let started = self.try_start(registry, id);
            let moved = (self.stats.host_to_device + self.stats.device_to_host - before) as u32;
            if let Some(op) = self.ops.get_mut(&id) {
                op.transfers += moved;
            }
            match started {
                Ok(Some(l)) => {
                    launches.push(l);
                    work += 1;
                }
                Ok(None) if self.ops.get(&id).is_some_and(|o| o.state() == TaskState::Issued) => {
                    still.push(id)
                }
                Ok(None) => work += 1,
                Err(e) => {
                    self.fail(registry, id, e.to_string());
                    work += 1;
                }
            }
        }
        self.issued = still;
        (work, launches)
    }

    /// Drives an issued op's data movement. Returns a kernel launch when a
    /// kernel became ready; other ops change state in place.
    fn try_start(&mut self, registry: &DeviceRegistry, id: TaskId) -> Result<Option<PendingLaunch>> {
        let op = &self.ops[&id];
        let args = op.args.clone();
        match op.kind.clone() {
            OpKind::Kernel {
                def,
                geometry,
                device_type,
                scratch,
            } => {
                let place = op.kernel_place().expect("placed");
                let device = op.device.expect("placed");
                let stream = op.stream;
                let mut ready = true;
                for &(o, mode) in &args {
                    let ok = if mode.reads() {
                        self.ensure_valid(registry, o, place)?
                    } else {
                        self.ensure_writable(registry, o, place)?
                    };
                    ready &= ok;
                }
                if !ready {
                    return Ok(None);
                }
                let mut kargs = Vec::with_capacity(args.len());
                for &(o, mode) in &args {
                    let r = &self.objects[&o];
                    let location = match place {
                        Place::Host => Location::host(r.host.as_ref().expect("host buffer")),
                        Place::Device(d) => Location::device(r.copies[&d].alloc),
                    };
                    kargs.push(KernelArg {
                        location,
                        len: r.size,
                        writable: mode.writes(),
                    });
                }
                let body = def.body_for(device_type).ok_or_else(|| CoreError::KernelUnavailable {
                    kernel: def.name().to_string(),
                    device_type,
                })?;
                self.set_state(registry, id, TaskState::Running);
                self.running.push(id);
                Ok(Some(PendingLaunch {
                    op: id,
                    device,
                    launch: KernelLaunch {
                        body,
                        args: kargs,
                        geometry,
                        scratch_bytes: scratch,
                        stream,
                        cost: def.cost_for(&geometry),
                        tag: Some(id),
                    },
                }))
            }
            OpKind::Access {
                auto_release, lease, ..
            } => {
                let (o, mode) = args[0];
                let place = match op.place {
                    Some(p) => p,
                    None => {
                        if self.objects.get_mut(&o).expect("object").settle_fills() {
                            return Ok(None);
                        }
                        let p = self.resolve_any_valid(registry, o);
                        self.ops.get_mut(&id).expect("op").place = Some(p);
                        if let Place::Device(d) = p {
                            self.ops.get_mut(&id).expect("op").device = Some(d);
                        }
                        p
                    }
                };
                let ok = if mode.reads() {
                    self.ensure_valid(registry, o, place)?
                } else {
                    self.ensure_writable(registry, o, place)?
                };
                if !ok {
                    return Ok(None);
                }
                if auto_release {
                    self.complete(registry, id, false);
                } else {
                    if lease && mode.writes() {
                        // The holder now owns the most recent version.
                        self.objects.get_mut(&o).expect("object").mark_written(Place::Host);
                    }
                    self.set_state(registry, id, TaskState::Running);
                }
                Ok(None)
            }
            OpKind::CopyOut { region, offset } => {
                let o = args[0].0;
                if self.objects.get_mut(&o).expect("object").settle_fills() {
                    return Ok(None);
                }
                let src = self.resolve_any_valid(registry, o);
                let r = &self.objects[&o];
                let size = r.size;
                match src {
                    Place::Host => {
                        let data = r.host.as_ref().expect("host buffer").read();
                        let off = offset as usize;
                        region.write().as_mut_slice()[off..off + size as usize]
                            .copy_from_slice(&data.as_slice()[..size as usize]);
                        drop(data);
                        self.complete(registry, id, false);
                    }
                    Place::Device(d) => {
                        let token = registry.enqueue_transfer_tagged(
                            Location::device(r.copies[&d].alloc),
                            Location::Host {
                                buffer: region,
                                offset,
                            },
                            size,
                            Direction::DeviceToHost,
                            Some(o),
                        )?;
                        self.stats.device_to_host += 1;
                        let op = self.ops.get_mut(&id).expect("op");
                        op.token = Some(token);
                        op.device = Some(d);
                        self.set_state(registry, id, TaskState::Running);
                        self.running.push(id);
                    }
                }
                Ok(None)
            }
            OpKind::Empty => unreachable!("empty op issued"),
        }
    }

    /// A VALID place, accelerators first. Materialises zeros on the host for
    /// an object that was never written.
    fn resolve_any_valid(&mut self, registry: &DeviceRegistry, o: ObjectId) -> Place {
        let r = &self.objects[&o];
        if let Some(d) = r.valid_device() {
            return Place::Device(d);
        }
        if r.host_state() != CopyState::Valid {
            self.materialize_zeros(registry, o);
        }
        Place::Host
    }

    pub fn attach_token(&mut self, id: TaskId, token: hrt_device::CompletionToken) {
        if let Some(op) = self.ops.get_mut(&id) {
            op.token = Some(token);
        }
    }

    // ---- step 5: retire --------------------------------------------------

    pub fn retire(&mut self, registry: &DeviceRegistry) -> usize {
        let ids = std::mem::take(&mut self.running);
        let mut work = 0;
        let mut still = Vec::with_capacity(ids.len());
        for id in ids {
            let Some(op) = self.ops.get(&id) else { continue };
            let Some(token) = &op.token else {
                still.push(id);
                continue;
            };
            if !token.is_done() {
                still.push(id);
                continue;
            }
            work += 1;
            match token.error() {
                None => self.complete(registry, id, true),
                Some(e) => self.fail(registry, id, e),
            }
        }
        self.running.extend(still);
        work
    }

    /// Finishes an op successfully. `written` applies the write effects of
    /// its writing arguments at the op's place.
    pub fn complete(&mut self, registry: &DeviceRegistry, id: TaskId, written: bool) {
        let place = self.ops.get(&id).and_then(|op| op.kernel_place().or(op.place));
        if written {
            if let Some(place) = place {
                let args = self.ops[&id].args.clone();
                for (o, mode) in args {
                    if mode.writes() {
                        if let Some(r) = self.objects.get_mut(&o) {
                            r.mark_written(place);
                        }
                    }
                }
            }
        }
        self.stats.tasks_completed += 1;
        self.finish(registry, id, TaskState::Complete, None);
    }

    pub fn fail(&mut self, registry: &DeviceRegistry, id: TaskId, error: String) {
        self.stats.tasks_failed += 1;
        self.finish(registry, id, TaskState::Failed, Some(error));
    }

    fn finish(&mut self, registry: &DeviceRegistry, id: TaskId, state: TaskState, error: Option<String>) {
        let Some(mut op) = self.ops.remove(&id) else { return };
        let was_issued = matches!(op.state(), TaskState::Issued | TaskState::Running);
        op.state = Some(state);
        self.trace_task(registry, &op);
        self.blocked.retain(|&b| b != id);
        self.issued.retain(|&b| b != id);
        self.running.retain(|&b| b != id);
        self.ready_access.retain(|&b| b != id);
        if op.is_kernel() && was_issued {
            if let Some(d) = op.device {
                if let Some(n) = self.outstanding.get_mut(&d) {
                    *n = n.saturating_sub(1);
                }
            }
        }
        let lease = matches!(op.kind, OpKind::Access { lease: true, .. });
        for &(o, _) in &op.args {
            if let Some(r) = self.objects.get_mut(&o) {
                r.active.retain(|&a| a != id);
                r.ref_count = r.ref_count.saturating_sub(1);
                if lease {
                    r.lease = match r.lease {
                        HostLease::Read(n) if n > 1 => HostLease::Read(n - 1),
                        _ => HostLease::None,
                    };
                }
                if r.destroy_requested && !self.doomed.contains(&o) {
                    self.doomed.push(o);
                }
            }
        }
        self.explicit.remove(&id);
        self.finished.insert(id, error);
        op.kind = OpKind::Empty;
        op.token = None;
        pool::give(op);
    }

    // ---- coherence -------------------------------------------------------

    pub fn ensure_host_buffer(&mut self, registry: &DeviceRegistry, o: ObjectId) {
        let r = self.objects.get_mut(&o).expect("object");
        if r.host.is_none() {
            r.host = Some(registry.pinned_pool().allocate(r.size as usize));
            r.host_state.get_or_insert(CopyState::Absent);
        }
    }

    fn materialize_zeros(&mut self, registry: &DeviceRegistry, o: ObjectId) {
        self.ensure_host_buffer(registry, o);
        let r = self.objects.get_mut(&o).expect("object");
        r.host.as_ref().expect("host buffer").write().as_mut_slice().fill(0);
        r.host_state = Some(CopyState::Valid);
    }

    /// Makes the copy at `place` VALID, enqueueing at most one transfer per
    /// call. Idempotent; returns true once the copy is VALID and the object
    /// has no transfer in flight.
    pub fn ensure_valid(&mut self, registry: &DeviceRegistry, o: ObjectId, place: Place) -> Result<bool> {
        let r = self.objects.get_mut(&o).ok_or(CoreError::UnknownObject(o))?;
        if r.settle_fills() {
            return Ok(false);
        }
        if r.state_at(place) == CopyState::Valid {
            return Ok(true);
        }
        if !r.any_valid() {
            self.materialize_zeros(registry, o);
            if place == Place::Host {
                return Ok(true);
            }
        }
        let r = &self.objects[&o];
        match place {
            Place::Host => {
                let d = r.valid_device().expect("a valid copy exists");
                self.stage_to_host(registry, o, d)?;
            }
            Place::Device(d) => {
                if r.host_state() == CopyState::Valid {
                    let copy = r.copies.get(&d).ok_or_else(|| {
                        CoreError::Device(DeviceError::InvalidLocation(format!(
                            "object {o} has no allocation on device {d}"
                        )))
                    })?;
                    let token = registry.enqueue_transfer_tagged(
                        Location::host(r.host.as_ref().expect("valid host copy")),
                        Location::device(copy.alloc),
                        r.size,
                        Direction::HostToDevice,
                        Some(o),
                    )?;
                    self.stats.host_to_device += 1;
                    self.objects.get_mut(&o).expect("object").copies.get_mut(&d).expect("copy").fill =
                        Some(token);
                } else {
                    let src = r.valid_device().expect("a valid copy exists");
                    self.stage_to_host(registry, o, src)?;
                }
            }
        }
        Ok(false)
    }

    fn stage_to_host(&mut self, registry: &DeviceRegistry, o: ObjectId, from: DeviceId) -> Result<()> {
        self.ensure_host_buffer(registry, o);
        let r = &self.objects[&o];
        let token = registry.enqueue_transfer_tagged(
            Location::device(r.copies[&from].alloc),
            Location::host(r.host.as_ref().expect("host buffer")),
            r.size,
            Direction::DeviceToHost,
            Some(o),
        )?;
        self.stats.device_to_host += 1;
        self.objects.get_mut(&o).expect("object").host_fill = Some(token);
        Ok(())
    }

    /// Write-only access: the destination exists and nothing is in flight.
    fn ensure_writable(&mut self, registry: &DeviceRegistry, o: ObjectId, place: Place) -> Result<bool> {
        if place == Place::Host {
            self.ensure_host_buffer(registry, o);
        }
        let r = self.objects.get_mut(&o).ok_or(CoreError::UnknownObject(o))?;
        Ok(!r.settle_fills())
    }

    /// Gives the object a copy slot on `device`, evicting if the pool is full.
    /// Ok(false) means not now; an error means never.
    pub fn ensure_device_alloc(
        &mut self,
        registry: &DeviceRegistry,
        o: ObjectId,
        device: DeviceId,
        exclude: &[ObjectId],
        lend: Option<crate::LentAllocation>,
    ) -> Result<bool> {
        let size = self.object(o)?.size;
        if self.objects[&o].copies.contains_key(&device) {
            if let Some(l) = lend {
                l.lender.return_allocation(l.alloc);
            }
            return Ok(true);
        }
        if let Some(l) = lend {
            self.objects.get_mut(&o).expect("object").copies.insert(
                device,
                DeviceCopy {
                    alloc: l.alloc,
                    state: CopyState::Absent,
                    fill: None,
                    lender: Some(l.lender),
                },
            );
            return Ok(true);
        }
        let backend = registry.device(device)?;
        let capacity = backend.descriptor().memory_capacity;
        if size > capacity {
            return Err(CoreError::Unsatisfiable { device, needed: size });
        }
        loop {
            match backend.pool_alloc(size) {
                Ok(alloc) => {
                    self.objects.get_mut(&o).expect("object").copies.insert(
                        device,
                        DeviceCopy {
                            alloc,
                            state: CopyState::Absent,
                            fill: None,
                            lender: None,
                        },
                    );
                    return Ok(true);
                }
                Err(DeviceError::OutOfDeviceMemory { .. }) => {
                    if self.evict_lru(registry, device, size, exclude).is_err() {
                        return Ok(false);
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Frees at least `needed` bytes on `device` from idle copies, least
    /// recently used first. A sole VALID copy is written back to the host
    /// before its memory is released.
    pub fn evict_lru(
        &mut self,
        registry: &DeviceRegistry,
        device: DeviceId,
        needed: u64,
        exclude: &[ObjectId],
    ) -> Result<u64> {
        let mut candidates: Vec<(u64, ObjectId)> = Vec::new();
        for (&id, r) in self.objects.iter_mut() {
            if exclude.contains(&id) || !r.idle() || r.settle_fills() {
                continue;
            }
            if let Some(c) = r.copies.get(&device) {
                if c.lender.is_none() {
                    candidates.push((r.lru_tick, id));
                }
            }
        }
        candidates.sort_unstable();
        let mut freed = 0;
        for (_, o) in candidates {
            if freed >= needed {
                break;
            }
            let r = &self.objects[&o];
            let c = &r.copies[&device];
            let sole = c.state == CopyState::Valid
                && r.host_state() != CopyState::Valid
                && r.copies.iter().all(|(&d, x)| d == device || x.state != CopyState::Valid);
            if sole {
                self.stage_to_host(registry, o, device)?;
            }
            let r = self.objects.get_mut(&o).expect("object");
            let c = r.copies.remove(&device).expect("copy");
            freed += c.alloc.size;
            registry.pool_free(c.alloc)?;
            self.stats.evictions += 1;
        }
        if freed < needed {
            return Err(CoreError::Unsatisfiable { device, needed });
        }
        Ok(freed)
    }

    // ---- destruction -----------------------------------------------------

    pub fn request_destroy(&mut self, o: ObjectId) {
        if let Some(r) = self.objects.get_mut(&o) {
            r.destroy_requested = true;
            if !self.doomed.contains(&o) {
                self.doomed.push(o);
            }
        }
    }

    pub fn reap(&mut self, registry: &DeviceRegistry) -> usize {
        let doomed = std::mem::take(&mut self.doomed);
        let mut reaped = 0;
        for o in doomed {
            let Some(r) = self.objects.get_mut(&o) else { continue };
            if r.ref_count > 0 || !r.idle() || r.settle_fills() {
                self.doomed.push(o);
                continue;
            }
            let mut r = self.objects.remove(&o).expect("object");
            for (_, c) in std::mem::take(&mut r.copies) {
                match c.lender {
                    Some(l) => l.return_allocation(c.alloc),
                    None => {
                        let _ = registry.pool_free(c.alloc);
                    }
                }
            }
            r.host = None;
            self.tracker.forget(o);
            self.stats.objects_destroyed += 1;
            reaped += 1;
            let trace = registry.trace();
            if trace.is_enabled() {
                trace.record(TraceEvent::Object {
                    object_id: o,
                    action: "destroyed".into(),
                    virtual_time: registry.now(),
                });
            }
            pool::give(r);
        }
        reaped
    }

    pub fn prune_history(&mut self) {
        if self.tracker.tracked_objects() > 4 * self.objects.len().max(64) {
            let finished = &self.finished;
            self.tracker.prune(|t| finished.contains_key(&t));
        }
    }

    /// True while any copy is still being filled, e.g. by an eviction
    /// write-back that no task waits on.
    pub fn fills_pending(&mut self) -> bool {
        let mut pending = false;
        for r in self.objects.values_mut() {
            pending |= r.settle_fills();
        }
        pending
    }

    pub fn has_pending_work(&self) -> bool {
        !self.ops.is_empty() || !self.doomed.is_empty()
    }
}
