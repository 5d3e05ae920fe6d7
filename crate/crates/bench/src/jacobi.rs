//! Distributed Jacobi3D with over-decomposition.
//!
//! The domain is cut into chunks; each chunk is a mobile object owning a
//! ghost-padded field on one device. A step packs the six boundary planes
//! into halo objects (kernels), ships them to the neighbouring chunks with
//! `mp_send`, unpacks received halos into the ghost layers (kernels) and runs
//! the 7-point update. Everything is asynchronous: a chunk moves to the next
//! step as soon as its neighbours' halos for the current one have arrived,
//! and the runtime orders the kernels through their data dependencies.
//!
//! Cells outside the domain are held at 1.0; the interior starts at 0.0.

use std::collections::BTreeMap;

use hrt_core::{ObjectHandle, TaskId};
use hrt_device::{Clock, ClockMode, DeviceDescriptor, DeviceRegistry, DeviceType, TraceRecorder, DEFAULT_COMPUTE_STREAMS, MIB};
use hrt_distributed::{Cluster, DistError, HandlerId, MobileRef, NetModel, Node, NodeConfig, Payload};
use serde::Serialize;

use crate::kernels::{jacobi_geometry, register_jacobi, ChunkShape, JacobiCosts, JacobiKernels};
use crate::report::StepRow;
use crate::timeline::{emit_timeline, Timeline};
use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct JacobiConfig {
    /// Interior cells along x, y, z.
    pub domain: [usize; 3],
    /// Chunk grid before over-decomposition.
    pub grid: [usize; 3],
    /// Over-decomposition factor: every chunk is split this many times
    /// along z.
    pub od: usize,
    pub ranks: usize,
    /// Accelerators per rank.
    pub devices: usize,
    pub streams: usize,
    pub steps: usize,
    pub device_aware: bool,
    /// Keep every received halo and compare it with the serial solution.
    pub check: bool,
    #[serde(skip)]
    pub costs: JacobiCosts,
    pub link_latency: f64,
    pub link_bandwidth: f64,
    #[serde(skip)]
    pub net: NetModel,
    pub gpu_memory: u64,
}

impl Default for JacobiConfig {
    fn default() -> Self {
        Self {
            domain: [64, 64, 64],
            grid: [1, 1, 1],
            od: 1,
            ranks: 1,
            devices: 1,
            streams: DEFAULT_COMPUTE_STREAMS,
            steps: 10,
            device_aware: false,
            check: false,
            costs: JacobiCosts::default(),
            link_latency: 10e-6,
            link_bandwidth: 10e9,
            net: NetModel::default(),
            gpu_memory: 1024 * MIB,
        }
    }
}

impl JacobiConfig {
    /// Chunks per axis after over-decomposition.
    pub fn chunk_grid(&self) -> [usize; 3] {
        [self.grid[0], self.grid[1], self.grid[2] * self.od]
    }

    pub fn chunk_count(&self) -> usize {
        self.chunk_grid().iter().product()
    }

    pub fn chunk_shape(&self) -> ChunkShape {
        let g = self.chunk_grid();
        ChunkShape {
            n: [self.domain[0] / g[0], self.domain[1] / g[1], self.domain[2] / g[2]],
        }
    }

    /// Owner of chunk `c`: contiguous blocks of chunks per rank.
    pub fn owner(&self, c: usize) -> usize {
        c * self.ranks / self.chunk_count()
    }

    fn validate(&self) -> Result<()> {
        let g = self.chunk_grid();
        if self.ranks == 0 || self.devices == 0 || self.streams == 0 || self.od == 0 {
            return Err("ranks, devices, streams and od must be positive".into());
        }
        for a in 0..3 {
            if g[a] == 0 || self.domain[a] == 0 || !self.domain[a].is_multiple_of(g[a]) {
                return Err(format!("domain {:?} does not split into {:?} chunks", self.domain, g).into());
            }
        }
        if self.chunk_count() < self.ranks {
            return Err(format!("{} chunks for {} ranks", self.chunk_count(), self.ranks).into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct JacobiReport {
    pub config: JacobiConfig,
    pub chunks: usize,
    /// Virtual time from the first kernel submission to the last update.
    pub makespan_s: f64,
    /// Time at which every chunk had finished each step.
    pub steps: Vec<StepRow>,
    /// Sum of the final interior in global x-major order.
    pub checksum: f64,
    pub halos_checked: usize,
    pub halo_mismatches: usize,
    #[serde(skip)]
    pub field: Vec<f64>,
    #[serde(skip)]
    pub timelines: Vec<Timeline>,
}

/// Linear chunk index of grid coordinates, x-major.
fn chunk_index(g: [usize; 3], c: [usize; 3]) -> usize {
    (c[0] * g[1] + c[1]) * g[2] + c[2]
}

fn chunk_coords(g: [usize; 3], i: usize) -> [usize; 3] {
    [i / (g[1] * g[2]), (i / g[2]) % g[1], i % g[2]]
}

/// Chunk across `face`, if it is inside the grid.
fn neighbour(g: [usize; 3], c: [usize; 3], face: usize) -> Option<[usize; 3]> {
    let axis = face / 2;
    let mut n = c;
    if face.is_multiple_of(2) {
        n[axis] = c[axis].checked_sub(1)?;
    } else {
        n[axis] = c[axis] + 1;
        if n[axis] >= g[axis] {
            return None;
        }
    }
    Some(n)
}

/// Serial solution: the padded global field after every step, starting
/// with the initial state.
pub fn serial_history(domain: [usize; 3], steps: usize) -> Vec<Vec<f64>> {
    let s = ChunkShape { n: domain };
    let mut u = vec![0.0; s.padded_len()];
    s.init(&mut u);
    let mut next = u.clone();
    let mut out = vec![u.clone()];
    for _ in 0..steps {
        s.update(&u, &mut next);
        std::mem::swap(&mut u, &mut next);
        out.push(u.clone());
    }
    out
}

/// Final interior of the serial solution in x-major order.
pub fn serial_reference(domain: [usize; 3], steps: usize) -> Vec<f64> {
    let s = ChunkShape { n: domain };
    let last = serial_history(domain, steps).pop().expect("initial state");
    interior(&s, &last)
}

fn interior(s: &ChunkShape, padded: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.cells());
    for i in 1..=s.n[0] {
        for j in 1..=s.n[1] {
            for k in 1..=s.n[2] {
                out.push(padded[s.idx(i, j, k)]);
            }
        }
    }
    out
}

/// Plain left-to-right sum.
pub fn checksum(field: &[f64]) -> f64 {
    field.iter().fold(0.0, |a, &v| a + v)
}

struct Chunk {
    shape: ChunkShape,
    origin: [usize; 3],
    u: ObjectHandle,
    next: ObjectHandle,
    neighbours: [Option<MobileRef>; 6],
    step: usize,
    steps: usize,
    /// Halos received so far per face; pairs are FIFO, so this is the step
    /// of the next one.
    received: [usize; 6],
    pending: BTreeMap<usize, Vec<(usize, ObjectHandle)>>,
    updates: Vec<TaskId>,
    /// `(step, face, halo)` kept for checking.
    log: Vec<(usize, usize, ObjectHandle)>,
    check: bool,
    k: JacobiKernels,
    /// `halo[f]` is the handler that lands a halo on a receiver's face `f`.
    halo: [HandlerId; 6],
}

impl Chunk {
    fn neighbour_count(&self) -> usize {
        self.neighbours.iter().flatten().count()
    }

    fn send_halos(&mut self, node: &Node) -> hrt_distributed::Result<()> {
        let rt = node.runtime();
        for face in 0..6 {
            let Some(to) = self.neighbours[face] else { continue };
            let h = rt.create::<f64>(&[self.shape.face_len(face) as u64])?;
            let (g, l) = jacobi_geometry(self.shape, face);
            rt.task()
                .reads(&self.u)
                .writes(&h)
                .set_threads(g, l)
                .device(DeviceType::GpuSim)
                .submit(self.k.pack)?;
            node.mp_send(to, self.halo[face ^ 1], h)?;
        }
        Ok(())
    }

    /// Runs every step whose halos are all in.
    fn advance(&mut self, node: &Node) -> hrt_distributed::Result<()> {
        let rt = node.runtime();
        let need = self.neighbour_count();
        while self.step < self.steps && self.pending.get(&self.step).map_or(0, Vec::len) == need {
            let halos = self.pending.remove(&self.step).unwrap_or_default();
            for (face, h) in halos {
                let (g, l) = jacobi_geometry(self.shape, face);
                rt.task()
                    .reads(&h)
                    .reads_writes(&self.u)
                    .set_threads(g, l)
                    .device(DeviceType::GpuSim)
                    .submit(self.k.unpack)?;
                if self.check {
                    self.log.push((self.step, face, h));
                }
            }
            let (g, l) = jacobi_geometry(self.shape, 0);
            let t = rt
                .task()
                .reads(&self.u)
                .writes(&self.next)
                .set_threads(g, l)
                .device(DeviceType::GpuSim)
                .submit(self.k.update)?;
            self.updates.push(t.id());
            std::mem::swap(&mut self.u, &mut self.next);
            self.step += 1;
            if self.step < self.steps {
                self.send_halos(node)?;
            }
        }
        Ok(())
    }
}

fn registry(cfg: &JacobiConfig, clock: &Clock) -> DeviceRegistry {
    let reg = DeviceRegistry::builder()
        .clock(clock.clone())
        .trace(TraceRecorder::enabled())
        .build();
    reg.register(DeviceDescriptor::host(0)).expect("host");
    for d in 1..=cfg.devices as u32 {
        reg.register(
            DeviceDescriptor::gpu_sim(d, cfg.gpu_memory)
                .with_streams(cfg.streams)
                .with_link(cfg.link_latency, cfg.link_bandwidth),
        )
        .expect("gpu");
    }
    reg
}

/// Runs the stencil on loopback ranks in this process under the virtual
/// clock.
pub fn run_jacobi3d(cfg: &JacobiConfig) -> Result<JacobiReport> {
    cfg.validate()?;
    let clock = Clock::new(ClockMode::Virtual);
    let node_cfg = NodeConfig {
        device_aware: cfg.device_aware,
        ..NodeConfig::default()
    };
    let cluster = Cluster::loopback(cfg.ranks as u32, clock, cfg.net, node_cfg, |_, c| registry(cfg, c))?;
    let grid = cfg.chunk_grid();
    let shape = cfg.chunk_shape();
    let total = cfg.chunk_count();

    let mut kernels = Vec::new();
    let mut halo_ids = Vec::new();
    for node in cluster.nodes() {
        kernels.push(register_jacobi(node.runtime(), cfg.costs)?);
        let mut ids = [0; 6];
        for (f, id) in ids.iter_mut().enumerate() {
            *id = node.register_handler(&format!("halo{f}"), move |ctx| {
                let Payload::Object(h) = ctx.take_payload() else {
                    return Err(DistError::Handler("halo without an object".into()));
                };
                let node = ctx.node();
                let chunk = ctx
                    .state::<Chunk>()
                    .ok_or_else(|| DistError::Handler("halo for something that is not a chunk".into()))?;
                let s = chunk.received[f];
                chunk.received[f] += 1;
                chunk.pending.entry(s).or_default().push((f, h));
                chunk.advance(node)
            });
        }
        halo_ids.push(ids);
    }

    // Chunks first, neighbours once every reference is known.
    let start = cluster.now();
    let mut refs = Vec::with_capacity(total);
    for c in 0..total {
        let r = cfg.owner(c);
        let node = cluster.node(r as u32);
        let rt = node.runtime();
        let u = rt.create::<f64>(&[shape.padded_len() as u64])?;
        let next = rt.create::<f64>(&[shape.padded_len() as u64])?;
        let (g, l) = jacobi_geometry(shape, 0);
        rt.task()
            .writes(&u)
            .writes(&next)
            .set_threads(g, l)
            .device(DeviceType::GpuSim)
            .submit(kernels[r].init)?;
        let at = chunk_coords(grid, c);
        refs.push(node.create_mobile_object(Chunk {
            shape,
            origin: [at[0] * shape.n[0], at[1] * shape.n[1], at[2] * shape.n[2]],
            u,
            next,
            neighbours: [None; 6],
            step: 0,
            steps: cfg.steps,
            received: [0; 6],
            pending: BTreeMap::new(),
            updates: Vec::new(),
            log: Vec::new(),
            check: cfg.check,
            k: kernels[r],
            halo: halo_ids[r],
        }));
    }
    for (c, &me) in refs.iter().enumerate() {
        let at = chunk_coords(grid, c);
        let node = cluster.node(me.owner_rank);
        node.with_state(me, |ch: &mut Chunk| -> hrt_distributed::Result<()> {
            for f in 0..6 {
                ch.neighbours[f] = neighbour(grid, at, f).map(|n| refs[chunk_index(grid, n)]);
            }
            ch.send_halos(node)?;
            ch.advance(node)
        })??;
    }
    let all_done = || {
        refs.iter().all(|&r| {
            cluster
                .node(r.owner_rank)
                .with_state(r, |ch: &mut Chunk| ch.step == ch.steps)
                .unwrap_or(false)
        })
    };
    cluster.run_until(all_done)?;
    cluster.run_to_idle()?;
    for n in cluster.nodes() {
        if let Some(e) = n.errors().first() {
            return Err(format!("rank {}: {e}", n.rank()).into());
        }
    }

    let timelines: Vec<Timeline> = cluster
        .nodes()
        .iter()
        .map(|n| emit_timeline(&n.runtime().registry().trace().events()))
        .collect();
    let mut ends = BTreeMap::new();
    for (rank, t) in timelines.iter().enumerate() {
        for (id, end) in t.kernel_ends() {
            ends.insert((rank as u32, id), end);
        }
    }

    // Gather the field, step times and (optionally) the logged halos.
    let gshape = ChunkShape { n: cfg.domain };
    let history = cfg.check.then(|| serial_history(cfg.domain, cfg.steps));
    let mut field = vec![0.0; gshape.cells()];
    let mut step_end = vec![0.0f64; cfg.steps];
    let (mut checked, mut mismatches) = (0, 0);
    for &r in &refs {
        let node = cluster.node(r.owner_rank);
        let rt = node.runtime();
        let (u, origin, updates, log) = node.with_state(r, |ch: &mut Chunk| {
            (ch.u.clone(), ch.origin, ch.updates.clone(), std::mem::take(&mut ch.log))
        })?;
        for (s, id) in updates.iter().enumerate() {
            let end = ends.get(&(r.owner_rank, *id)).copied().unwrap_or(f64::NAN);
            step_end[s] = step_end[s].max(end - start);
        }
        let view = rt.request_data(&u, true, false)?.wait()?;
        let vals: Vec<f64> = view.to_vec();
        drop(view);
        rt.release(&u)?;
        for i in 0..shape.n[0] {
            for j in 0..shape.n[1] {
                for k in 0..shape.n[2] {
                    let g = ((origin[0] + i) * cfg.domain[1] + origin[1] + j) * cfg.domain[2] + origin[2] + k;
                    field[g] = vals[shape.idx(i + 1, j + 1, k + 1)];
                }
            }
        }
        if let Some(hist) = &history {
            for (s, face, h) in log {
                let view = rt.request_data(&h, true, false)?.wait()?;
                let got: Vec<f64> = view.to_vec();
                drop(view);
                rt.release(&h)?;
                checked += 1;
                if got != expected_halo(&gshape, &hist[s], shape, origin, face) {
                    mismatches += 1;
                }
            }
        }
    }
    cluster.shutdown()?;

    let makespan = step_end.iter().copied().fold(0.0, f64::max);
    Ok(JacobiReport {
        config: cfg.clone(),
        chunks: total,
        makespan_s: makespan,
        steps: step_end
            .iter()
            .enumerate()
            .map(|(step, &t)| StepRow {
                step,
                virtual_makespan_s: t,
            })
            .collect(),
        checksum: checksum(&field),
        halos_checked: checked,
        halo_mismatches: mismatches,
        field,
        timelines,
    })
}

/// The plane just outside a chunk's `face`, read from the padded global
/// field.
fn expected_halo(g: &ChunkShape, global: &[f64], shape: ChunkShape, origin: [usize; 3], face: usize) -> Vec<f64> {
    let axis = face / 2;
    // Padded coordinate of the plane across the face.
    let layer = if face.is_multiple_of(2) { origin[axis] } else { origin[axis] + shape.n[axis] + 1 };
    let (da, db) = shape.plane_dims(face);
    let mut out = Vec::with_capacity(da * db);
    for a in 0..da {
        for b in 0..db {
            let mut p = [0usize; 3];
            p[axis] = layer;
            let others: Vec<usize> = (0..3).filter(|&x| x != axis).collect();
            p[others[0]] = origin[others[0]] + a + 1;
            p[others[1]] = origin[others[1]] + b + 1;
            out.push(global[g.idx(p[0], p[1], p[2])]);
        }
    }
    out
}
