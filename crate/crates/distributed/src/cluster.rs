//! Several ranks in one process sharing one clock.
//!
//! Every runtime's idle hook drives all ranks, so blocking on any node (or
//! on the cluster) moves the whole world forward. Under a virtual clock time
//! only advances when no rank can make progress, which keeps multi-rank runs
//! deterministic.

use std::sync::Arc;

use hrt_core::{Runtime, RuntimeConfig};
use hrt_device::{Clock, DeviceRegistry};

use crate::error::Result;
use crate::node::{MobileRef, Node, NodeConfig};
use crate::transport::{LoopbackTransport, NetModel, Transport};

pub struct Cluster {
    nodes: Vec<Node>,
    clock: Clock,
}

impl Cluster {
    /// `registry(rank, clock)` builds each rank's devices on the shared clock.
    pub fn loopback(
        world: u32,
        clock: Clock,
        net: NetModel,
        config: NodeConfig,
        mut registry: impl FnMut(u32, &Clock) -> DeviceRegistry,
    ) -> Result<Cluster> {
        let transports = LoopbackTransport::create(world, clock.clone(), net, config.device_aware);
        let mut nodes = Vec::with_capacity(world as usize);
        for t in transports {
            let rank = t.rank();
            let reg = Arc::new(registry(rank, &clock));
            let rt = Runtime::with_config(reg, RuntimeConfig::from_env());
            nodes.push(Node::new(Arc::new(t), rt, config.clone())?);
        }
        let weak: Vec<_> = nodes.iter().map(Node::downgrade).collect();
        for n in &nodes {
            let weak = weak.clone();
            n.runtime().set_co_progress(Some(Arc::new(move || {
                weak.iter()
                    .filter_map(|w| w.upgrade())
                    .map(|n| n.progress())
                    .sum()
            })));
        }
        Ok(Cluster { nodes, clock })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, rank: u32) -> &Node {
        &self.nodes[rank as usize]
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn progress(&self) -> usize {
        self.nodes.iter().map(Node::progress).sum()
    }

    pub fn run_until(&self, done: impl FnMut() -> bool) -> Result<()> {
        self.nodes[0].run_until(done)
    }

    /// Every rank's queues are empty and its runtime has nothing in flight.
    pub fn is_idle(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.is_quiescent() && n.runtime().in_flight() == 0)
    }

    /// Runs until all ranks are idle.
    pub fn run_to_idle(&self) -> Result<()> {
        self.run_until(|| self.is_idle())
    }

    /// `refs[r]` are rank r's contributions; returns everyone's, in rank order.
    pub fn exchange_refs(&self, refs: &[Vec<MobileRef>]) -> Result<Vec<MobileRef>> {
        let rounds = self
            .nodes
            .iter()
            .zip(refs)
            .map(|(n, r)| n.start_exchange(r))
            .collect::<Result<Vec<_>>>()?;
        let mut out: Vec<Option<Vec<MobileRef>>> = vec![None; self.nodes.len()];
        self.run_until(|| {
            for (i, n) in self.nodes.iter().enumerate() {
                if out[i].is_none() {
                    out[i] = n.exchange_result(rounds[i]);
                }
            }
            out.iter().all(Option::is_some)
        })?;
        Ok(out.swap_remove(0).expect("exchange finished"))
    }

    pub fn shutdown(&self) -> Result<()> {
        for n in &self.nodes {
            n.begin_shutdown();
        }
        self.run_until(|| self.nodes.iter().all(Node::is_shut_down))
    }
}
