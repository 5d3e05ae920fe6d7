//! Mobile objects and object messaging across ranks.
//!
//! A [`Node`] wraps one rank's [`hrt_core::Runtime`]. Handlers are invoked on
//! mobile objects by [`Node::mp_send`]; an object payload is read in the
//! runtime's dependency order, shipped either through host staging or
//! straight from device memory, and re-registered on the receiver before the
//! handler runs. [`Node::hetero_put`] and [`Node::hetero_get`] move bytes
//! into and out of published objects with the same ordering guarantees.
//!
//! Transports: [`LoopbackTransport`] for ranks in one process (driven
//! together by [`Cluster`]) and [`TcpTransport`] for one process per rank.

mod cache;
mod cluster;
mod error;
mod node;
pub mod transport;
pub mod wire;

use std::net::{SocketAddr, ToSocketAddrs};
use std::sync::Arc;

use hrt_core::{Runtime, RuntimeConfig};
use hrt_device::DeviceRegistry;

pub use cache::{ReceiveCache, DEFAULT_CACHE_BYTES, DEFAULT_SLAB_BYTES};
pub use cluster::Cluster;
pub use error::{DistError, Result};
pub use node::{
    GlobalObjectId, HandlerCtx, HandlerFn, HandlerId, MobileRef, Node, NodeConfig, NodeStats, Payload, NO_HANDLER,
};
pub use transport::{LoopbackTransport, NetModel, TcpTransport, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Loopback,
    Tcp,
}

/// Process-level settings from `HRT_TRANSPORT`, `HRT_RANKS`, `HRT_RANK` and
/// `HRT_PEERS` (comma-separated host:port, one per rank).
#[derive(Debug, Clone)]
pub struct LaunchConfig {
    pub transport: TransportKind,
    pub ranks: u32,
    pub rank: u32,
    pub peers: Vec<SocketAddr>,
    pub node: NodeConfig,
}

impl LaunchConfig {
    pub fn from_env() -> Result<Self> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let transport = match var("HRT_TRANSPORT").as_deref().map(str::trim) {
            None | Some("loopback") => TransportKind::Loopback,
            Some("tcp") => TransportKind::Tcp,
            Some(v) => return Err(DistError::Config(format!("HRT_TRANSPORT={v}"))),
        };
        let num = |k: &str, default: u32| -> Result<u32> {
            var(k).map_or(Ok(default), |v| {
                v.trim().parse().map_err(|_| DistError::Config(format!("{k}={v}")))
            })
        };
        let mut peers = Vec::new();
        if let Some(list) = var("HRT_PEERS") {
            for p in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                let addr = p
                    .to_socket_addrs()
                    .map_err(|e| DistError::Config(format!("peer {p}: {e}")))?
                    .next()
                    .ok_or_else(|| DistError::Config(format!("peer {p} does not resolve")))?;
                peers.push(addr);
            }
        }
        let ranks = num("HRT_RANKS", peers.len().max(1) as u32)?;
        let rank = num("HRT_RANK", 0)?;
        if rank >= ranks {
            return Err(DistError::Config(format!("rank {rank} outside {ranks} ranks")));
        }
        if transport == TransportKind::Tcp && peers.len() != ranks as usize {
            return Err(DistError::Config(format!(
                "HRT_PEERS lists {} addresses for {ranks} ranks",
                peers.len()
            )));
        }
        Ok(Self {
            transport,
            ranks,
            rank,
            peers,
            node: NodeConfig::from_env()?,
        })
    }
}

/// Brings up this process's rank. Loopback only supports a single rank per
/// call; use [`Cluster::loopback`] for several ranks in one process.
pub fn init(cfg: &LaunchConfig, registry: DeviceRegistry) -> Result<Node> {
    let clock = registry.clock().clone();
    let rt = Runtime::with_config(Arc::new(registry), RuntimeConfig::from_env());
    let transport: Arc<dyn Transport> = match cfg.transport {
        TransportKind::Loopback => {
            if cfg.ranks != 1 {
                return Err(DistError::Config(
                    "loopback ranks share a process; build them with Cluster::loopback".into(),
                ));
            }
            Arc::new(transport::single(clock, cfg.node.device_aware))
        }
        TransportKind::Tcp => Arc::new(TcpTransport::connect(
            cfg.rank,
            &cfg.peers,
            cfg.node.device_aware,
            cfg.node.wait_timeout,
        )?),
    };
    Node::new(transport, rt, cfg.node.clone())
}
