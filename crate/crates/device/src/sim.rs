//! Host and simulated-accelerator backends.
//!
//! Both backends execute real host code and real byte copies; only the timing
//! and queueing of the accelerator are modelled. Under the virtual clock an
//! operation's effect is applied at enqueue time and its token completes at
//! `max(stream_free, now) + duration`. Under the wall clock a per-device worker
//! thread applies operations in enqueue order.

use std::collections::HashMap;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use parking_lot::{Mutex, RwLockReadGuard, RwLockWriteGuard};

use crate::allocator::{AllocError, FirstFitAllocator};
use crate::backend::{
    ArgView, DeviceBackend, DeviceStats, Direction, KernelInvocation, KernelLaunch,
};
use crate::memory::{shared_zeroed, AlignedBytes, SharedBytes};
use crate::trace::{Interval, IntervalKind, Lane, TraceEvent, TraceRecorder};
use crate::{
    Clock, CompletionToken, DeviceAllocation, DeviceDescriptor, DeviceError, DeviceType,
    Location, Result, TokenKind,
};

/// Optional single host bus shared by every device link, one lane per
/// direction.
#[derive(Debug)]
pub struct SharedBus {
    bandwidth: f64,
    free_at: Mutex<[f64; 2]>,
}

impl SharedBus {
    pub fn new(bandwidth: f64) -> Arc<Self> {
        Arc::new(Self {
            bandwidth,
            free_at: Mutex::new([0.0; 2]),
        })
    }
}

struct EngineState {
    alloc: FirstFitAllocator,
    memory: HashMap<u64, SharedBytes>,
    compute_free: Vec<f64>,
    transfer_free: [f64; 2],
    stats: DeviceStats,
}

type Job = Box<dyn FnOnce() + Send>;

struct Engine {
    desc: DeviceDescriptor,
    clock: Clock,
    trace: TraceRecorder,
    bus: Option<Arc<SharedBus>>,
    state: Mutex<EngineState>,
    worker: Option<Mutex<mpsc::Sender<Job>>>,
}

impl Engine {
    fn new(
        desc: DeviceDescriptor,
        clock: Clock,
        trace: TraceRecorder,
        bus: Option<Arc<SharedBus>>,
    ) -> Result<Self> {
        desc.validate()?;
        let worker = match clock {
            Clock::Virtual(_) => None,
            Clock::Wall(_) => {
                let (tx, rx) = mpsc::channel::<Job>();
                thread::Builder::new()
                    .name(format!("hrt-device-{}", desc.device_id))
                    .spawn(move || {
                        while let Ok(job) = rx.recv() {
                            job();
                        }
                    })
                    .map_err(|e| DeviceError::Config(e.to_string()))?;
                Some(Mutex::new(tx))
            }
        };
        let state = EngineState {
            alloc: FirstFitAllocator::new(desc.memory_capacity),
            memory: HashMap::new(),
            compute_free: vec![0.0; desc.compute_stream_count],
            transfer_free: [0.0; 2],
            stats: DeviceStats {
                capacity: desc.memory_capacity,
                ..Default::default()
            },
        };
        Ok(Self {
            desc,
            clock,
            trace,
            bus,
            state: Mutex::new(state),
            worker,
        })
    }

    fn pool_alloc(&self, size: u64) -> Result<DeviceAllocation> {
        let mut st = self.state.lock();
        let offset = st.alloc.allocate(size).map_err(|e| match e {
            AllocError::ZeroSize => DeviceError::ZeroSizeAllocation,
            AllocError::OutOfMemory {
                requested,
                largest_free,
            } => DeviceError::OutOfDeviceMemory {
                device: self.desc.device_id,
                requested,
                largest_free,
            },
            AllocError::DoubleFree { offset } => DeviceError::DoubleFree {
                device: self.desc.device_id,
                offset,
            },
        })?;
        st.memory.insert(offset, shared_zeroed(size as usize));
        Ok(DeviceAllocation {
            device_id: self.desc.device_id,
            offset,
            size,
            alignment: st.alloc.alignment(),
        })
    }

    fn pool_free(&self, alloc: DeviceAllocation) -> Result<()> {
        if alloc.device_id != self.desc.device_id {
            return Err(DeviceError::InvalidLocation(format!(
                "allocation belongs to device {}, not {}",
                alloc.device_id, self.desc.device_id
            )));
        }
        let mut st = self.state.lock();
        st.alloc
            .free(alloc.offset)
            .map_err(|_| DeviceError::DoubleFree {
                device: self.desc.device_id,
                offset: alloc.offset,
            })?;
        st.memory.remove(&alloc.offset);
        Ok(())
    }

    fn resolve(&self, st: &EngineState, loc: &Location, len: u64) -> Result<(SharedBytes, usize)> {
        let (bytes, offset) = match loc {
            Location::Host { buffer, offset } => (buffer.shared().clone(), *offset),
            Location::Device { alloc, offset } => {
                if alloc.device_id != self.desc.device_id {
                    return Err(DeviceError::InvalidLocation(format!(
                        "allocation on device {} used on device {}",
                        alloc.device_id, self.desc.device_id
                    )));
                }
                let mem = st.memory.get(&alloc.offset).ok_or_else(|| {
                    DeviceError::InvalidLocation(format!(
                        "no live allocation at offset {} on device {}",
                        alloc.offset, self.desc.device_id
                    ))
                })?;
                (mem.clone(), *offset)
            }
        };
        let have = bytes.read().len() as u64;
        if offset + len > have {
            return Err(DeviceError::InvalidLocation(format!(
                "range {offset}+{len} exceeds region of {have} bytes"
            )));
        }
        Ok((bytes, offset as usize))
    }

    /// Reserves a slot on a stream and returns `(start, end)`. Transfers also
    /// pass `(direction, bytes)` so a shared bus can serialise them.
    fn reserve(&self, st: &mut EngineState, lane: Lane, duration: f64, bus_use: Option<(usize, u64)>) -> (f64, f64) {
        let now = self.clock.now();
        let free = match lane {
            Lane::Compute(i) => &mut st.compute_free[i],
            Lane::HostToDevice => &mut st.transfer_free[0],
            Lane::DeviceToHost => &mut st.transfer_free[1],
        };
        let mut start = free.max(now);
        let mut duration = duration;
        if let (Some((dir, bytes)), Some(bus)) = (bus_use, &self.bus) {
            let mut lanes = bus.free_at.lock();
            start = start.max(lanes[dir]);
            let bw = bus.bandwidth.min(self.desc.transfer_bandwidth);
            duration = self.desc.transfer_latency + bytes as f64 / bw;
            lanes[dir] = start + duration;
        }
        let end = start + duration;
        *free = end;
        (start, end)
    }

    fn enqueue_transfer(
        &self,
        src: Location,
        dst: Location,
        size: u64,
        direction: Direction,
        tag: Option<u64>,
    ) -> Result<CompletionToken> {
        if self.desc.device_type == DeviceType::Host {
            return Err(DeviceError::InvalidLocation(
                "the host device has no transfer link".into(),
            ));
        }
        let (host_side, dev_side) = match direction {
            Direction::HostToDevice => (&src, &dst),
            Direction::DeviceToHost => (&dst, &src),
        };
        let host_buf = match host_side {
            Location::Host { buffer, .. } => buffer.clone(),
            _ => {
                return Err(DeviceError::InvalidLocation(format!(
                    "{direction:?} transfer needs a host endpoint"
                )))
            }
        };
        if dev_side.device_id() != Some(self.desc.device_id) {
            return Err(DeviceError::InvalidLocation(format!(
                "{direction:?} transfer needs an endpoint on device {}",
                self.desc.device_id
            )));
        }
        let mut st = self.state.lock();
        let (src_bytes, src_off) = self.resolve(&st, &src, size)?;
        let (dst_bytes, dst_off) = self.resolve(&st, &dst, size)?;
        if size == 0 {
            return Ok(CompletionToken::completed(TokenKind::Transfer, self.clock.clone()));
        }
        if !host_buf.is_pinned() {
            st.stats.unpinned_transfers += 1;
        }
        match direction {
            Direction::HostToDevice => {
                st.stats.h2d_transfers += 1;
                st.stats.h2d_bytes += size;
            }
            Direction::DeviceToHost => {
                st.stats.d2h_transfers += 1;
                st.stats.d2h_bytes += size;
            }
        }
        let lane = match direction {
            Direction::HostToDevice => Lane::HostToDevice,
            Direction::DeviceToHost => Lane::DeviceToHost,
        };
        let copy = move || {
            let s = src_bytes.read();
            let mut d = dst_bytes.write();
            let n = size as usize;
            d.as_mut_slice()[dst_off..dst_off + n].copy_from_slice(&s.as_slice()[src_off..src_off + n]);
        };
        match &self.clock {
            Clock::Virtual(vc) => {
                let duration = self.desc.transfer_time(size);
                let (start, end) =
                    self.reserve(&mut st, lane, duration, Some((direction.stream_index(), size)));
                drop(st);
                copy();
                let token = CompletionToken::new(TokenKind::Transfer, self.clock.clone(), end);
                token.set_outcome(Ok(()));
                vc.schedule(end);
                self.trace_interval(lane, IntervalKind::Transfer, start, end, tag, size);
                Ok(token)
            }
            Clock::Wall(_) => {
                drop(st);
                let token = CompletionToken::new(TokenKind::Transfer, self.clock.clone(), 0.0);
                let t = token.clone();
                let clock = self.clock.clone();
                let trace = self.trace.clone();
                let device = self.desc.device_id;
                self.submit(Box::new(move || {
                    let start = clock.now();
                    copy();
                    let end = clock.now();
                    trace.record(TraceEvent::Interval(Interval {
                        device,
                        lane,
                        kind: IntervalKind::Transfer,
                        start,
                        end,
                        tag,
                        bytes: size,
                    }));
                    t.set_outcome(Ok(()));
                    t.finish();
                }));
                Ok(token)
            }
        }
    }

    fn enqueue_kernel(&self, launch: KernelLaunch) -> Result<CompletionToken> {
        if launch.stream >= self.desc.compute_stream_count {
            return Err(DeviceError::InvalidStream {
                device: self.desc.device_id,
                index: launch.stream,
                count: self.desc.compute_stream_count,
            });
        }
        let mut st = self.state.lock();
        let mut resolved = Vec::with_capacity(launch.args.len());
        for (index, arg) in launch.args.iter().enumerate() {
            let on_this_device = match (&arg.location, self.desc.device_type) {
                (Location::Host { .. }, DeviceType::Host) => true,
                (Location::Device { alloc, .. }, DeviceType::GpuSim) => {
                    alloc.device_id == self.desc.device_id
                }
                _ => false,
            };
            if !on_this_device {
                return Err(DeviceError::ArgumentOnWrongDevice {
                    device: self.desc.device_id,
                    index,
                });
            }
            let (bytes, off) = self.resolve(&st, &arg.location, arg.len)?;
            resolved.push((bytes, off, arg.len as usize, arg.writable));
        }
        for i in 0..resolved.len() {
            for j in i + 1..resolved.len() {
                if Arc::ptr_eq(&resolved[i].0, &resolved[j].0) {
                    return Err(DeviceError::InvalidLocation(format!(
                        "kernel arguments {i} and {j} alias the same region"
                    )));
                }
            }
        }
        st.stats.kernels += 1;
        let lane = Lane::Compute(launch.stream);
        match &self.clock {
            Clock::Virtual(vc) => {
                drop(st);
                let began = Instant::now();
                let outcome = run_kernel(&launch, &resolved);
                let measured = began.elapsed().as_secs_f64();
                let duration = launch.cost.unwrap_or(measured);
                let (start, end) = self.reserve(&mut self.state.lock(), lane, duration, None);
                let token = CompletionToken::new(TokenKind::Kernel, self.clock.clone(), end);
                token.set_outcome(outcome);
                vc.schedule(end);
                self.trace_interval(lane, IntervalKind::Kernel, start, end, launch.tag, 0);
                Ok(token)
            }
            Clock::Wall(_) => {
                drop(st);
                let token = CompletionToken::new(TokenKind::Kernel, self.clock.clone(), 0.0);
                let t = token.clone();
                let clock = self.clock.clone();
                let trace = self.trace.clone();
                let device = self.desc.device_id;
                self.submit(Box::new(move || {
                    let start = clock.now();
                    let outcome = run_kernel(&launch, &resolved);
                    let end = clock.now();
                    trace.record(TraceEvent::Interval(Interval {
                        device,
                        lane,
                        kind: IntervalKind::Kernel,
                        start,
                        end,
                        tag: launch.tag,
                        bytes: 0,
                    }));
                    t.set_outcome(outcome);
                    t.finish();
                }));
                Ok(token)
            }
        }
    }

    fn submit(&self, job: Job) {
        if let Some(w) = &self.worker {
            // The worker only exits once the sender is dropped.
            let _ = w.lock().send(job);
        }
    }

    fn trace_interval(&self, lane: Lane, kind: IntervalKind, start: f64, end: f64, tag: Option<u64>, bytes: u64) {
        self.trace.record(TraceEvent::Interval(Interval {
            device: self.desc.device_id,
            lane,
            kind,
            start,
            end,
            tag,
            bytes,
        }));
    }

    fn read_direct(&self, alloc: &DeviceAllocation, offset: u64, len: u64) -> Result<Vec<u8>> {
        let st = self.state.lock();
        let (bytes, off) = self.resolve(&st, &Location::Device { alloc: *alloc, offset }, len)?;
        drop(st);
        let b = bytes.read();
        Ok(b.as_slice()[off..off + len as usize].to_vec())
    }

    fn write_direct(&self, alloc: &DeviceAllocation, offset: u64, data: &[u8]) -> Result<()> {
        let st = self.state.lock();
        let (bytes, off) =
            self.resolve(&st, &Location::Device { alloc: *alloc, offset }, data.len() as u64)?;
        drop(st);
        bytes.write().as_mut_slice()[off..off + data.len()].copy_from_slice(data);
        Ok(())
    }

    fn stats(&self) -> DeviceStats {
        let st = self.state.lock();
        DeviceStats {
            live_bytes: st.alloc.live_bytes(),
            free_bytes: st.alloc.free_bytes(),
            live_allocations: st.alloc.live_count(),
            ..st.stats
        }
    }
}

enum Guard<'a> {
    Read(RwLockReadGuard<'a, AlignedBytes>),
    Write(RwLockWriteGuard<'a, AlignedBytes>),
}

fn run_kernel(launch: &KernelLaunch, resolved: &[(SharedBytes, usize, usize, bool)]) -> Result<(), String> {
    // Lock in address order so concurrent kernels cannot deadlock.
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    order.sort_by_key(|&i| Arc::as_ptr(&resolved[i].0) as usize);
    let mut guards: Vec<Option<Guard<'_>>> = (0..resolved.len()).map(|_| None).collect();
    for i in order {
        let (bytes, _, _, writable) = &resolved[i];
        guards[i] = Some(if *writable {
            Guard::Write(bytes.write())
        } else {
            Guard::Read(bytes.read())
        });
    }
    let args: Vec<ArgView<'_>> = guards
        .iter_mut()
        .zip(resolved)
        .map(|(g, (_, off, len, _))| match g.as_mut().expect("locked") {
            Guard::Read(r) => ArgView::Read(&r.as_slice()[*off..off + len]),
            Guard::Write(w) => ArgView::Write(&mut w.as_mut_slice()[*off..off + len]),
        })
        .collect();
    let mut scratch = vec![0u8; launch.scratch_bytes];
    let mut inv = KernelInvocation {
        args,
        geometry: launch.geometry,
        scratch: &mut scratch,
    };
    let body = launch.body.clone();
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| body(&mut inv))) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "kernel panicked".into())),
    }
}

macro_rules! backend_impl {
    ($ty:ident) => {
        impl DeviceBackend for $ty {
            fn descriptor(&self) -> &DeviceDescriptor {
                &self.0.desc
            }
            fn pool_alloc(&self, size: u64) -> Result<DeviceAllocation> {
                self.0.pool_alloc(size)
            }
            fn pool_free(&self, alloc: DeviceAllocation) -> Result<()> {
                self.0.pool_free(alloc)
            }
            fn enqueue_transfer(
                &self,
                src: Location,
                dst: Location,
                size: u64,
                direction: Direction,
                tag: Option<u64>,
            ) -> Result<CompletionToken> {
                self.0.enqueue_transfer(src, dst, size, direction, tag)
            }
            fn enqueue_kernel(&self, launch: KernelLaunch) -> Result<CompletionToken> {
                self.0.enqueue_kernel(launch)
            }
            fn read_direct(&self, alloc: &DeviceAllocation, offset: u64, len: u64) -> Result<Vec<u8>> {
                self.0.read_direct(alloc, offset, len)
            }
            fn write_direct(&self, alloc: &DeviceAllocation, offset: u64, data: &[u8]) -> Result<()> {
                self.0.write_direct(alloc, offset, data)
            }
            fn stats(&self) -> DeviceStats {
                self.0.stats()
            }
        }
    };
}

/// The host CPU as a compute device. Kernel arguments are host regions.
pub struct HostDevice(Engine);

impl HostDevice {
    pub fn new(desc: DeviceDescriptor, clock: Clock, trace: TraceRecorder) -> Result<Self> {
        if desc.device_type != DeviceType::Host {
            return Err(DeviceError::InvalidDescriptor {
                id: desc.device_id,
                reason: "HostDevice needs a host descriptor".into(),
            });
        }
        Engine::new(desc, clock, trace, None).map(Self)
    }
}

/// A simulated accelerator with its own memory pool and host link.
pub struct SimGpuDevice(Engine);

impl SimGpuDevice {
    pub fn new(
        desc: DeviceDescriptor,
        clock: Clock,
        trace: TraceRecorder,
        bus: Option<Arc<SharedBus>>,
    ) -> Result<Self> {
        if desc.device_type != DeviceType::GpuSim {
            return Err(DeviceError::InvalidDescriptor {
                id: desc.device_id,
                reason: "SimGpuDevice needs a gpu_sim descriptor".into(),
            });
        }
        Engine::new(desc, clock, trace, bus).map(Self)
    }
}

backend_impl!(HostDevice);
backend_impl!(SimGpuDevice);
