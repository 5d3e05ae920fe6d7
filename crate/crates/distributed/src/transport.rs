//! Reliable, ordered frame delivery between ranks.

use std::collections::{HashSet, VecDeque};
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use hrt_device::Clock;
use parking_lot::Mutex;

use crate::error::{DistError, Result};
use crate::wire::Frame;

pub trait Transport: Send + Sync {
    fn rank(&self) -> u32;

    fn world_size(&self) -> u32;

    /// Payloads may be taken from and written to device memory directly.
    fn device_aware(&self) -> bool;

    fn send(&self, to: u32, frame: Frame) -> Result<()>;

    fn try_recv(&self) -> Result<Option<(u32, Frame)>>;

    /// Frames addressed to this rank that have not been received yet, when
    /// the transport can tell.
    fn undelivered(&self) -> usize {
        0
    }

    fn close(&self);
}

/// Link model applied by the loopback transport under a virtual clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetModel {
    pub latency: f64,
    pub bandwidth: f64,
}

impl Default for NetModel {
    /// Roughly a 100 Gb/s interconnect.
    fn default() -> Self {
        Self {
            latency: 2e-6,
            bandwidth: 12.5e9,
        }
    }
}

impl NetModel {
    pub fn time(&self, bytes: usize) -> f64 {
        self.latency + bytes as f64 / self.bandwidth
    }
}

struct Envelope {
    src: u32,
    deliver_at: f64,
    frame: Frame,
}

struct Mailboxes {
    boxes: Vec<Mutex<VecDeque<Envelope>>>,
    /// Last delivery time per (src, dst) pair keeps pairs in order.
    last: Mutex<Vec<f64>>,
}

/// In-process transport. Under a virtual clock each frame becomes visible
/// after the modelled link time.
pub struct LoopbackTransport {
    rank: u32,
    shared: Arc<Mailboxes>,
    clock: Clock,
    net: NetModel,
    device_aware: bool,
    closed: AtomicBool,
}

impl LoopbackTransport {
    /// One connected endpoint per rank.
    pub fn create(world: u32, clock: Clock, net: NetModel, device_aware: bool) -> Vec<LoopbackTransport> {
        let n = world as usize;
        let shared = Arc::new(Mailboxes {
            boxes: (0..n).map(|_| Mutex::new(VecDeque::new())).collect(),
            last: Mutex::new(vec![0.0; n * n]),
        });
        (0..world)
            .map(|rank| LoopbackTransport {
                rank,
                shared: shared.clone(),
                clock: clock.clone(),
                net,
                device_aware,
                closed: AtomicBool::new(false),
            })
            .collect()
    }
}

impl Transport for LoopbackTransport {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn world_size(&self) -> u32 {
        self.shared.boxes.len() as u32
    }

    fn device_aware(&self) -> bool {
        self.device_aware
    }

    fn send(&self, to: u32, frame: Frame) -> Result<()> {
        if self.closed.load(Ordering::Acquire) {
            return Err(DistError::ShutDown);
        }
        let n = self.shared.boxes.len();
        if to as usize >= n {
            return Err(DistError::UnknownRank(to));
        }
        let deliver_at = match self.clock.as_virtual() {
            Some(v) => {
                let mut last = self.shared.last.lock();
                let slot = &mut last[self.rank as usize * n + to as usize];
                let at = v.now().max(*slot) + self.net.time(frame.len());
                *slot = at;
                v.schedule(at);
                at
            }
            None => 0.0,
        };
        self.shared.boxes[to as usize].lock().push_back(Envelope {
            src: self.rank,
            deliver_at,
            frame,
        });
        Ok(())
    }

    fn try_recv(&self) -> Result<Option<(u32, Frame)>> {
        let now = self.clock.as_virtual().map(|v| v.now());
        let mut q = self.shared.boxes[self.rank as usize].lock();
        let mut blocked = HashSet::new();
        let mut pick = None;
        for (i, e) in q.iter().enumerate() {
            if blocked.contains(&e.src) {
                continue;
            }
            if now.is_none_or(|t| e.deliver_at <= t) {
                pick = Some(i);
                break;
            }
            blocked.insert(e.src);
        }
        Ok(pick.and_then(|i| q.remove(i)).map(|e| (e.src, e.frame)))
    }

    fn undelivered(&self) -> usize {
        self.shared.boxes[self.rank as usize].lock().len()
    }

    fn close(&self) {
        self.closed.store(true, Ordering::Release);
    }
}

const HANDSHAKE: [u8; 4] = *b"HRTC";

/// One TCP stream per rank pair; the higher rank connects to the lower.
pub struct TcpTransport {
    rank: u32,
    world: u32,
    device_aware: bool,
    writers: Vec<Option<Mutex<BufWriter<TcpStream>>>>,
    incoming: Mutex<Receiver<std::result::Result<(u32, Frame), String>>>,
    closed: AtomicBool,
}

impl TcpTransport {
    /// Binds `peers[rank]` and connects to every other rank.
    pub fn connect(rank: u32, peers: &[SocketAddr], device_aware: bool, timeout: Duration) -> Result<Self> {
        let addr = peers.get(rank as usize).ok_or(DistError::UnknownRank(rank))?;
        let listener = TcpListener::bind(addr)?;
        Self::establish(rank, listener, peers, device_aware, timeout)
    }

    /// Like [`TcpTransport::connect`] with an already bound listener.
    pub fn establish(
        rank: u32,
        listener: TcpListener,
        peers: &[SocketAddr],
        device_aware: bool,
        timeout: Duration,
    ) -> Result<Self> {
        let world = peers.len() as u32;
        if rank >= world {
            return Err(DistError::UnknownRank(rank));
        }
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();
        for peer in 0..rank {
            let mut s = loop {
                match TcpStream::connect(peers[peer as usize]) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(DistError::Transport(format!("connect to rank {peer}: {e}")))
                    }
                    Err(_) => std::thread::sleep(Duration::from_millis(10)),
                }
            };
            s.write_all(&HANDSHAKE)?;
            s.write_all(&rank.to_le_bytes())?;
            streams[peer as usize] = Some(s);
        }
        listener.set_nonblocking(true)?;
        let mut accepted = 0;
        while accepted < world - 1 - rank {
            match listener.accept() {
                Ok((mut s, _)) => {
                    s.set_nonblocking(false)?;
                    s.set_read_timeout(Some(timeout))?;
                    let mut hs = [0u8; 8];
                    s.read_exact(&mut hs)?;
                    s.set_read_timeout(None)?;
                    let peer = u32::from_le_bytes(hs[4..8].try_into().expect("4 bytes"));
                    if hs[..4] != HANDSHAKE || peer <= rank || peer >= world || streams[peer as usize].is_some() {
                        return Err(DistError::Transport(format!("bad handshake from rank {peer}")));
                    }
                    streams[peer as usize] = Some(s);
                    accepted += 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(DistError::Transport("timed out waiting for peers".into()));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        let (tx, rx): (Sender<_>, _) = mpsc::channel();
        let mut writers = Vec::with_capacity(world as usize);
        for (peer, s) in streams.into_iter().enumerate() {
            let Some(s) = s else {
                writers.push(None);
                continue;
            };
            s.set_nodelay(true)?;
            let reader = s.try_clone()?;
            let tx = tx.clone();
            std::thread::Builder::new()
                .name(format!("hrt-tcp-{rank}<-{peer}"))
                .spawn(move || {
                    let mut r = BufReader::with_capacity(1 << 16, reader);
                    loop {
                        match Frame::read_from(&mut r) {
                            Ok(Some(f)) => {
                                if tx.send(Ok((peer as u32, f))).is_err() {
                                    break;
                                }
                            }
                            Ok(None) => break,
                            Err(e) => {
                                let _ = tx.send(Err(format!("rank {peer}: {e}")));
                                break;
                            }
                        }
                    }
                })?;
            writers.push(Some(Mutex::new(BufWriter::with_capacity(1 << 16, s))));
        }
        Ok(Self {
            rank,
            world,
            device_aware,
            writers,
            incoming: Mutex::new(rx),
            closed: AtomicBool::new(false),
        })
    }
}

impl Transport for TcpTransport {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn world_size(&self) -> u32 {
        self.world
    }

    fn device_aware(&self) -> bool {
        self.device_aware
    }

    fn send(&self, to: u32, frame: Frame) -> Result<()> {
        if self.closed.load(Ordering::Acquire) {
            return Err(DistError::ShutDown);
        }
        let w = self
            .writers
            .get(to as usize)
            .and_then(|w| w.as_ref())
            .ok_or(DistError::UnknownRank(to))?;
        let mut w = w.lock();
        frame.write_to(&mut *w)?;
        w.flush()?;
        Ok(())
    }

    fn try_recv(&self) -> Result<Option<(u32, Frame)>> {
        match self.incoming.lock().try_recv() {
            Ok(Ok(m)) => Ok(Some(m)),
            Ok(Err(e)) => Err(DistError::Transport(e)),
            Err(_) => Ok(None),
        }
    }

    fn close(&self) {
        if self.closed.swap(true, Ordering::AcqRel) {
            return;
        }
        for w in self.writers.iter().flatten() {
            let mut w = w.lock();
            let _ = w.flush();
            let _ = w.get_ref().shutdown(std::net::Shutdown::Write);
        }
    }
}

/// A transport to oneself, for single-rank runs.
pub fn single(clock: Clock, device_aware: bool) -> LoopbackTransport {
    LoopbackTransport::create(1, clock, NetModel::default(), device_aware)
        .pop()
        .expect("one endpoint")
}
