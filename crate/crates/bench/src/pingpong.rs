//! GPU-to-GPU ping-pong between two ranks.
//!
//! Rank 0 creates an object, pulls it onto its GPU and sends it to rank 1,
//! which runs a no-op read-write kernel on it and sends it straight back.
//! Rank 0 then runs the same kernel, so both ends pay for getting the data
//! onto a device. Every round trip is checked byte for byte.

use std::net::{SocketAddr, TcpListener};
use std::str::FromStr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use hrt_core::{KernelRef, ObjectDesc, ObjectHandle, Runtime};
use hrt_device::{Clock, ClockMode, DeviceDescriptor, DeviceRegistry, DeviceType, MIB};
use hrt_distributed::{Cluster, HandlerId, MobileRef, NetModel, Node, NodeConfig, NodeStats, Payload, TcpTransport};
use serde::Serialize;

use crate::kernels::{register_touch, TOUCH};
use crate::report::PingPongRow;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PingPongTransport {
    /// Both ranks in one process, virtual clock.
    Loopback,
    /// One thread per rank over localhost TCP, wall clock.
    Tcp,
}

impl FromStr for PingPongTransport {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "loopback" => Ok(Self::Loopback),
            "tcp" => Ok(Self::Tcp),
            _ => Err(format!("unknown transport `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PingPongConfig {
    pub sizes: Vec<u64>,
    pub iters: usize,
    /// Device-aware (direct) path instead of host staging.
    pub device_aware: bool,
    pub transport: PingPongTransport,
    #[serde(skip)]
    pub net: NetModel,
    pub gpu_memory: u64,
}

impl Default for PingPongConfig {
    fn default() -> Self {
        Self {
            sizes: default_sizes(),
            iters: 100,
            device_aware: false,
            transport: PingPongTransport::Loopback,
            net: NetModel::default(),
            gpu_memory: 512 * MIB,
        }
    }
}

/// Powers of two from 8 B to 8 MiB.
pub fn default_sizes() -> Vec<u64> {
    (3..=23).map(|p| 1u64 << p).collect()
}

/// Per-size counters summed over the ranks visible to the driver (both
/// under loopback, rank 0 under TCP).
#[derive(Debug, Clone, Default, Serialize)]
pub struct SizeDetail {
    pub size_bytes: u64,
    pub staging_copies: u64,
    pub inline_messages: u64,
    pub split_messages: u64,
    pub direct_reads: u64,
    pub direct_writes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PingPongReport {
    pub config: PingPongConfig,
    pub rows: Vec<PingPongRow>,
    pub details: Vec<SizeDetail>,
}

#[derive(Default)]
struct Peer {
    /// Where replies go.
    peer: Option<MobileRef>,
    got: Option<ObjectHandle>,
}

struct Ids {
    ping: HandlerId,
    touch: KernelRef,
}

fn touch(rt: &Runtime, k: KernelRef, h: &ObjectHandle) -> Result<hrt_core::TaskHandle> {
    Ok(rt
        .task()
        .reads_writes(h)
        .set_threads([1, 1, 1], [1, 1, 1])
        .device(DeviceType::GpuSim)
        .submit(k)?)
}

/// Registers the kernel, both handlers and this rank's mobile object.
fn setup(node: &Node) -> Result<(Ids, MobileRef)> {
    let k = register_touch(node.runtime())?;
    let ping = node.register_handler("ping", |ctx| {
        let Payload::Object(obj) = ctx.take_payload() else {
            return Err(hrt_distributed::DistError::Handler("ping without an object".into()));
        };
        let rt = ctx.runtime();
        let k = rt.kernel(TOUCH).expect("touch registered");
        rt.task()
            .reads_writes(&obj)
            .set_threads([1, 1, 1], [1, 1, 1])
            .device(DeviceType::GpuSim)
            .submit(k)?;
        let back = ctx
            .state::<Peer>()
            .and_then(|p| p.peer)
            .ok_or_else(|| hrt_distributed::DistError::Handler("ping before the exchange".into()))?;
        let pong = ctx.node().handler_id("pong").expect("pong registered");
        ctx.node().mp_send(back, pong, obj)
    });
    node.register_handler("pong", |ctx| {
        let Payload::Object(obj) = ctx.take_payload() else {
            return Err(hrt_distributed::DistError::Handler("pong without an object".into()));
        };
        if let Some(p) = ctx.state::<Peer>() {
            p.got = Some(obj);
        }
        Ok(())
    });
    let me = node.create_mobile_object(Peer::default());
    Ok((Ids { ping, touch: k }, me))
}

fn pattern(size: u64, iter: usize) -> Vec<u8> {
    (0..size).map(|i| (i as usize * 31 + iter * 7 + size as usize) as u8).collect()
}

fn sum_stats(stats: &[NodeStats]) -> SizeDetail {
    let mut d = SizeDetail::default();
    for s in stats {
        d.staging_copies += s.staging_copies;
        d.inline_messages += s.inline_messages;
        d.split_messages += s.split_messages;
        d.direct_reads += s.direct_reads;
        d.direct_writes += s.direct_writes;
    }
    d
}

fn diff(after: &SizeDetail, before: &SizeDetail, size: u64) -> SizeDetail {
    SizeDetail {
        size_bytes: size,
        staging_copies: after.staging_copies - before.staging_copies,
        inline_messages: after.inline_messages - before.inline_messages,
        split_messages: after.split_messages - before.split_messages,
        direct_reads: after.direct_reads - before.direct_reads,
        direct_writes: after.direct_writes - before.direct_writes,
    }
}

/// Rank 0's side. `all_stats` reads the counters of every rank it can see.
fn drive(
    node: &Node,
    ids: &Ids,
    me: MobileRef,
    peer: MobileRef,
    cfg: &PingPongConfig,
    all_stats: &dyn Fn() -> Vec<NodeStats>,
) -> Result<(Vec<PingPongRow>, Vec<SizeDetail>)> {
    let rt = node.runtime();
    let mut rows = Vec::new();
    let mut details = Vec::new();
    for &size in &cfg.sizes {
        let before = sum_stats(&all_stats());
        let mut total = 0.0;
        for it in 0..cfg.iters {
            let data = pattern(size, it);
            let obj = rt.create_object_from_host(ObjectDesc::new(&[size], 1)?, &data)?;
            touch(rt, ids.touch, &obj)?.wait()?;
            let t0 = rt.now();
            node.mp_send(peer, ids.ping, obj)?;
            node.run_until(|| node.with_state(me, |p: &mut Peer| p.got.is_some()).unwrap_or(false))?;
            let back = node
                .with_state(me, |p: &mut Peer| p.got.take())?
                .expect("reply arrived");
            touch(rt, ids.touch, &back)?.wait()?;
            total += rt.now() - t0;

            let view = rt.request_data(&back, true, false)?.wait()?;
            let ok = view.read(|b| b == data.as_slice());
            drop(view);
            rt.release(&back)?;
            if !ok {
                return Err(format!("payload of {size} bytes corrupted in iteration {it}").into());
            }
        }
        let after = sum_stats(&all_stats());
        details.push(diff(&after, &before, size));
        let latency = total / cfg.iters as f64 / 2.0;
        rows.push(PingPongRow {
            size_bytes: size,
            iters: cfg.iters,
            mean_latency_s: latency,
            bandwidth_bps: if latency > 0.0 { size as f64 / latency } else { f64::INFINITY },
        });
    }
    Ok((rows, details))
}

fn registry(clock: &Clock, gpu_memory: u64) -> DeviceRegistry {
    let reg = DeviceRegistry::builder().clock(clock.clone()).build();
    reg.register(DeviceDescriptor::host(0)).expect("host");
    reg.register(DeviceDescriptor::gpu_sim(1, gpu_memory)).expect("gpu");
    reg
}

pub fn run_pingpong(cfg: &PingPongConfig) -> Result<PingPongReport> {
    if cfg.iters == 0 || cfg.sizes.contains(&0) {
        return Err("iterations and sizes must be positive".into());
    }
    let node_cfg = NodeConfig {
        device_aware: cfg.device_aware,
        wait_timeout: Duration::from_secs(600),
        ..NodeConfig::default()
    };
    let (rows, details) = match cfg.transport {
        PingPongTransport::Loopback => {
            let clock = Clock::new(ClockMode::Virtual);
            let c = Cluster::loopback(2, clock, cfg.net, node_cfg, |_, clock| registry(clock, cfg.gpu_memory))?;
            let mut ids = Vec::new();
            let mut refs = Vec::new();
            for n in c.nodes() {
                let (i, me) = setup(n)?;
                ids.push(i);
                refs.push(vec![me]);
            }
            let all = c.exchange_refs(&refs)?;
            c.node(1).with_state(all[1], |p: &mut Peer| p.peer = Some(all[0]))?;
            let stats = || c.nodes().iter().map(Node::stats).collect::<Vec<_>>();
            let out = drive(c.node(0), &ids[0], all[0], all[1], cfg, &stats)?;
            c.shutdown()?;
            out
        }
        PingPongTransport::Tcp => {
            let listeners = [TcpListener::bind("127.0.0.1:0")?, TcpListener::bind("127.0.0.1:0")?];
            let peers: Vec<SocketAddr> = listeners
                .iter()
                .map(|l| l.local_addr())
                .collect::<std::io::Result<_>>()?;
            let [l0, l1] = listeners;
            let peers1 = peers.clone();
            let gpu = cfg.gpu_memory;
            let device_aware = cfg.device_aware;
            let cfg1 = node_cfg.clone();
            let server = thread::spawn(move || -> Result<()> {
                let t = TcpTransport::establish(1, l1, &peers1, device_aware, Duration::from_secs(30))?;
                let clock = Clock::new(ClockMode::Wall);
                let rt = Runtime::new(Arc::new(registry(&clock, gpu)));
                let node = Node::new(Arc::new(t), rt, cfg1)?;
                let (_, me) = setup(&node)?;
                let all = node.exchange_refs(&[me])?;
                node.with_state(me, |p: &mut Peer| p.peer = Some(all[0]))?;
                // Second round: rank 0 may not ping before the peer is set.
                node.exchange_refs(&[])?;
                // Serves pings until rank 0 says goodbye.
                node.shutdown()?;
                Ok(())
            });
            let t = TcpTransport::establish(0, l0, &peers, device_aware, Duration::from_secs(30))?;
            let clock = Clock::new(ClockMode::Wall);
            let rt = Runtime::new(Arc::new(registry(&clock, gpu)));
            let node = Node::new(Arc::new(t), rt, node_cfg)?;
            let (ids, me) = setup(&node)?;
            let all = node.exchange_refs(&[me])?;
            node.exchange_refs(&[])?;
            // Rank 1 lives on another thread; details count rank 0 only.
            let stats = || vec![node.stats()];
            let out = drive(&node, &ids, all[0], all[1], cfg, &stats);
            node.shutdown()?;
            server.join().map_err(|_| "rank 1 panicked")??;
            out?
        }
    };
    Ok(PingPongReport {
        config: cfg.clone(),
        rows,
        details,
    })
}
