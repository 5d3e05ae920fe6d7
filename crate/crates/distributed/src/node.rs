//! One rank: mobile objects, handler dispatch and object messaging.

use std::any::Any;
use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, Instant};

use hrt_core::{AccessGrant, AccessMode, AccessTarget, CopyState, ObjectDesc, ObjectHandle, Place, Runtime, TaskHandle};
use hrt_device::{DeviceId, DeviceType, HostBuffer, Location, TraceEvent};
use parking_lot::{Mutex, RwLock};

use crate::cache::{ReceiveCache, DEFAULT_CACHE_BYTES, DEFAULT_SLAB_BYTES};
use crate::error::{DistError, Result};
use crate::transport::Transport;
use crate::wire::{Frame, HeteroMeta, MessageHeader, MsgKind, HEADER_LEN};

pub type HandlerId = u32;

/// Handler slot meaning "no completion callback".
pub const NO_HANDLER: HandlerId = u32::MAX;

// Control codes carried in the handler field of ACK messages.
const CTRL_EXCHANGE: u32 = 1;
const CTRL_BYE: u32 = 2;
const CTRL_ERROR: u32 = 3;

/// Location-independent name of a mobile object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MobileRef {
    pub owner_rank: u32,
    pub local_index: u64,
}

/// Names an object published by its owner for put/get.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GlobalObjectId {
    pub owner_rank: u32,
    pub object_id: u64,
    /// Lets the sender reject size mismatches before anything moves.
    pub size_bytes: u64,
}

/// What a message carries.
#[derive(Debug, Default)]
pub enum Payload {
    #[default]
    None,
    Bytes(Vec<u8>),
    Object(ObjectHandle),
}

impl From<Vec<u8>> for Payload {
    fn from(b: Vec<u8>) -> Self {
        Payload::Bytes(b)
    }
}

impl From<&[u8]> for Payload {
    fn from(b: &[u8]) -> Self {
        Payload::Bytes(b.to_vec())
    }
}

impl From<ObjectHandle> for Payload {
    fn from(h: ObjectHandle) -> Self {
        Payload::Object(h)
    }
}

impl From<&ObjectHandle> for Payload {
    fn from(h: &ObjectHandle) -> Self {
        Payload::Object(h.clone())
    }
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    /// Move object payloads straight from/to device memory.
    pub device_aware: bool,
    pub recv_cache_bytes: u64,
    pub recv_slab_bytes: u64,
    /// When false every payload takes the two-message path.
    pub inline_small: bool,
    /// Wall-clock limit for blocking calls.
    pub wait_timeout: Duration,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            device_aware: false,
            recv_cache_bytes: DEFAULT_CACHE_BYTES,
            recv_slab_bytes: DEFAULT_SLAB_BYTES,
            inline_small: true,
            wait_timeout: Duration::from_secs(60),
        }
    }
}

impl NodeConfig {
    /// Reads `HRT_DEVICE_AWARE` (0|1) and `HRT_RECV_CACHE_MB`.
    pub fn from_env() -> Result<Self> {
        let mut c = Self::default();
        if let Ok(v) = std::env::var("HRT_DEVICE_AWARE") {
            c.device_aware = match v.trim() {
                "1" | "true" => true,
                "0" | "false" | "" => false,
                _ => return Err(DistError::Config(format!("HRT_DEVICE_AWARE={v}"))),
            };
        }
        if let Ok(v) = std::env::var("HRT_RECV_CACHE_MB") {
            let mb: u64 = v
                .trim()
                .parse()
                .map_err(|_| DistError::Config(format!("HRT_RECV_CACHE_MB={v}")))?;
            c.recv_cache_bytes = mb << 20;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub messages_sent: u64,
    pub inline_messages: u64,
    pub split_messages: u64,
    pub data_messages: u64,
    pub bytes_sent: u64,
    pub messages_received: u64,
    /// Host<->device copies made only because a payload crossed the network.
    pub staging_copies: u64,
    pub direct_reads: u64,
    pub direct_writes: u64,
    pub handlers_run: u64,
    pub handler_errors: u64,
    pub recv_cache_hits: u64,
    pub recv_cache_misses: u64,
}

pub type HandlerFn = Arc<dyn Fn(&mut HandlerCtx<'_>) -> Result<()> + Send + Sync>;

/// What a running handler sees.
pub struct HandlerCtx<'a> {
    node: &'a Node,
    source: u32,
    target: Option<MobileRef>,
    state: Option<&'a mut (dyn Any + Send)>,
    payload: Payload,
}

impl<'a> HandlerCtx<'a> {
    pub fn node(&self) -> &'a Node {
        self.node
    }

    pub fn runtime(&self) -> &'a Runtime {
        self.node.runtime()
    }

    pub fn source(&self) -> u32 {
        self.source
    }

    pub fn target(&self) -> Option<MobileRef> {
        self.target
    }

    /// The target mobile object's state, if it has type `T`.
    pub fn state<T: 'static>(&mut self) -> Option<&mut T> {
        self.state.as_deref_mut()?.downcast_mut::<T>()
    }

    pub fn bytes(&self) -> &[u8] {
        match &self.payload {
            Payload::Bytes(b) => b,
            _ => &[],
        }
    }

    pub fn object(&self) -> Option<&ObjectHandle> {
        match &self.payload {
            Payload::Object(h) => Some(h),
            _ => None,
        }
    }

    pub fn take_payload(&mut self) -> Payload {
        std::mem::take(&mut self.payload)
    }
}

struct Job {
    source: u32,
    handler: HandlerId,
    target: Option<MobileRef>,
    payload: Payload,
}

enum Source {
    Ready(Vec<u8>),
    /// Inline object payload being copied into a staging region.
    Region {
        task: TaskHandle,
        region: HostBuffer,
        handle: ObjectHandle,
    },
    Grant(AccessGrant),
}

struct Outgoing {
    dest: u32,
    header: MessageHeader,
    source: Source,
}

struct PendingPut {
    grant: AccessGrant,
    bytes: Vec<u8>,
    source: u32,
    handler: HandlerId,
}

#[derive(Default)]
struct NetState {
    outgoing: VecDeque<Outgoing>,
    to_self: VecDeque<Frame>,
    partial: HashMap<(u32, u64), MessageHeader>,
    puts: Vec<PendingPut>,
    jobs: BTreeMap<u32, VecDeque<Job>>,
    next_source: u32,
    exchange: BTreeMap<u64, BTreeMap<u32, Vec<MobileRef>>>,
    exchange_rounds: u64,
    byes: HashSet<u32>,
    bye_sent: bool,
    errors: Vec<String>,
}

impl NetState {
    fn quiescent(&self) -> bool {
        self.outgoing.is_empty()
            && self.to_self.is_empty()
            && self.partial.is_empty()
            && self.puts.is_empty()
            && self.jobs.values().all(VecDeque::is_empty)
    }
}

struct NodeInner {
    rank: u32,
    world: u32,
    transport: Arc<dyn Transport>,
    rt: Runtime,
    config: NodeConfig,
    handlers: RwLock<Vec<(String, HandlerFn)>>,
    mobiles: Mutex<Vec<Option<Box<dyn Any + Send>>>>,
    globals: Mutex<HashMap<u64, ObjectHandle>>,
    net: Mutex<NetState>,
    cache: ReceiveCache,
    gpus: Vec<DeviceId>,
    gpu_rr: AtomicUsize,
    next_corr: AtomicU64,
    stats: Mutex<NodeStats>,
    dispatching: AtomicBool,
    closing: AtomicBool,
    shut: AtomicBool,
}

/// A rank. Cheap to clone.
#[derive(Clone)]
pub struct Node(Arc<NodeInner>);

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("rank", &self.0.rank)
            .field("world", &self.0.world)
            .finish()
    }
}

impl Node {
    /// Wraps a runtime and a connected transport. Reserves the receive cache
    /// on every simulated GPU.
    pub fn new(transport: Arc<dyn Transport>, rt: Runtime, config: NodeConfig) -> Result<Node> {
        let reg = rt.registry().clone();
        let gpus = reg.ids_of_type(DeviceType::GpuSim);
        let cache = if config.recv_cache_bytes > 0 {
            ReceiveCache::reserve(&reg, &gpus, config.recv_cache_bytes, config.recv_slab_bytes)
        } else {
            ReceiveCache::disabled()
        };
        let node = Node(Arc::new(NodeInner {
            rank: transport.rank(),
            world: transport.world_size(),
            transport,
            rt,
            config,
            handlers: RwLock::new(Vec::new()),
            mobiles: Mutex::new(Vec::new()),
            globals: Mutex::new(HashMap::new()),
            net: Mutex::new(NetState::default()),
            cache,
            gpus,
            gpu_rr: AtomicUsize::new(0),
            next_corr: AtomicU64::new(1),
            stats: Mutex::new(NodeStats::default()),
            dispatching: AtomicBool::new(false),
            closing: AtomicBool::new(false),
            shut: AtomicBool::new(false),
        }));
        let weak = node.downgrade();
        node.0.rt.set_co_progress(Some(Arc::new(move || {
            weak.upgrade().map_or(0, |n| n.network_progress())
        })));
        Ok(node)
    }

    pub(crate) fn downgrade(&self) -> WeakNode {
        WeakNode(Arc::downgrade(&self.0))
    }

    pub fn rank(&self) -> u32 {
        self.0.rank
    }

    pub fn world_size(&self) -> u32 {
        self.0.world
    }

    pub fn runtime(&self) -> &Runtime {
        &self.0.rt
    }

    pub fn config(&self) -> &NodeConfig {
        &self.0.config
    }

    /// Whether object payloads bypass host staging.
    pub fn direct(&self) -> bool {
        self.0.config.device_aware && self.0.transport.device_aware()
    }

    pub fn receive_cache(&self) -> &ReceiveCache {
        &self.0.cache
    }

    pub fn stats(&self) -> NodeStats {
        let mut s = self.0.stats.lock().clone();
        s.recv_cache_hits = self.0.cache.hits();
        s.recv_cache_misses = self.0.cache.misses();
        s
    }

    /// Errors raised while processing asynchronous work, oldest first.
    pub fn errors(&self) -> Vec<String> {
        self.0.net.lock().errors.clone()
    }

    // ---- handlers and mobile objects ------------------------------------------

    /// Ids follow registration order, so every rank must register the same
    /// handlers in the same order.
    pub fn register_handler<F>(&self, name: &str, f: F) -> HandlerId
    where
        F: Fn(&mut HandlerCtx<'_>) -> Result<()> + Send + Sync + 'static,
    {
        let mut h = self.0.handlers.write();
        h.push((name.to_string(), Arc::new(f)));
        (h.len() - 1) as HandlerId
    }

    pub fn handler_id(&self, name: &str) -> Option<HandlerId> {
        self.0
            .handlers
            .read()
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| i as HandlerId)
    }

    pub fn create_mobile_object<T: Any + Send>(&self, state: T) -> MobileRef {
        let mut m = self.0.mobiles.lock();
        m.push(Some(Box::new(state)));
        MobileRef {
            owner_rank: self.0.rank,
            local_index: (m.len() - 1) as u64,
        }
    }

    /// Runs `f` on a local mobile object's state.
    pub fn with_state<T: 'static, R>(&self, r: MobileRef, f: impl FnOnce(&mut T) -> R) -> Result<R> {
        if r.owner_rank != self.0.rank {
            return Err(DistError::NotOwner(r));
        }
        let mut m = self.0.mobiles.lock();
        let slot = m.get_mut(r.local_index as usize).ok_or(DistError::UnknownMobile(r))?;
        let state = slot.as_mut().ok_or(DistError::Busy(r))?;
        let t = state.downcast_mut::<T>().ok_or(DistError::WrongType)?;
        Ok(f(t))
    }

    /// Starts a collective exchange of mobile references; every rank must
    /// call it the same number of times. Returns the round to poll.
    pub fn start_exchange(&self, refs: &[MobileRef]) -> Result<u64> {
        self.check_open()?;
        let mut body = Vec::with_capacity(refs.len() * 12);
        for r in refs {
            body.extend_from_slice(&r.owner_rank.to_le_bytes());
            body.extend_from_slice(&r.local_index.to_le_bytes());
        }
        let round = {
            let mut net = self.0.net.lock();
            let round = net.exchange_rounds;
            net.exchange_rounds += 1;
            net.exchange.entry(round).or_default().insert(self.0.rank, refs.to_vec());
            round
        };
        for peer in (0..self.0.world).filter(|&p| p != self.0.rank) {
            let mut h = MessageHeader::new(MsgKind::Ack, peer, 0, CTRL_EXCHANGE).with_payload(body.len() as u64);
            h.correlation_id = round;
            self.push(peer, h, Source::Ready(body.clone()));
        }
        Ok(round)
    }

    /// Every rank's references in rank order, once all have arrived.
    pub fn exchange_result(&self, round: u64) -> Option<Vec<MobileRef>> {
        let mut net = self.0.net.lock();
        if net.exchange.get(&round).map_or(0, BTreeMap::len) < self.0.world as usize {
            return None;
        }
        let all = net.exchange.remove(&round)?;
        Some(all.into_values().flatten().collect())
    }

    /// Blocking form of [`Node::start_exchange`]; needs the other ranks to
    /// make progress on their own threads.
    pub fn exchange_refs(&self, refs: &[MobileRef]) -> Result<Vec<MobileRef>> {
        let round = self.start_exchange(refs)?;
        let mut out = None;
        self.run_until(|| {
            out = self.exchange_result(round);
            out.is_some()
        })?;
        Ok(out.expect("exchange finished"))
    }

    // ---- global objects --------------------------------------------------------

    /// Makes a local object reachable by put/get from other ranks.
    pub fn publish(&self, h: &ObjectHandle) -> GlobalObjectId {
        self.0.globals.lock().insert(h.id(), h.clone());
        GlobalObjectId {
            owner_rank: self.0.rank,
            object_id: h.id(),
            size_bytes: h.size_bytes(),
        }
    }

    pub fn unpublish(&self, gid: GlobalObjectId) {
        self.0.globals.lock().remove(&gid.object_id);
    }

    // ---- messaging ----------------------------------------------------------------

    fn check_open(&self) -> Result<()> {
        if self.0.shut.load(Ordering::Acquire) {
            Err(DistError::ShutDown)
        } else {
            Ok(())
        }
    }

    fn check_rank(&self, r: u32) -> Result<()> {
        if r >= self.0.world {
            Err(DistError::UnknownRank(r))
        } else {
            Ok(())
        }
    }

    fn corr(&self) -> u64 {
        self.0.next_corr.fetch_add(1, Ordering::Relaxed)
    }

    fn push(&self, dest: u32, header: MessageHeader, source: Source) {
        self.0.net.lock().outgoing.push_back(Outgoing { dest, header, source });
    }

    /// Invokes `handler` on the target mobile object with a byte payload or
    /// an object. An object is read in dependency order: tasks submitted
    /// earlier that write it finish first, and later writers wait until the
    /// bytes are on the wire.
    pub fn mp_send(&self, target: MobileRef, handler: HandlerId, payload: impl Into<Payload>) -> Result<()> {
        self.check_open()?;
        self.check_rank(target.owner_rank)?;
        if handler as usize >= self.0.handlers.read().len() {
            return Err(DistError::UnknownHandler(handler));
        }
        let payload = payload.into();
        match payload {
            Payload::Object(h) => {
                let mut header = MessageHeader::new(
                    MsgKind::HandlerHeteroMeta,
                    target.owner_rank,
                    target.local_index,
                    handler,
                );
                self.push_object(header_meta(&mut header, self, &h)?, h)
            }
            other => {
                let bytes = match other {
                    Payload::Bytes(b) => b,
                    _ => Vec::new(),
                };
                let header = MessageHeader::new(MsgKind::Handler, target.owner_rank, target.local_index, handler);
                self.push_bytes(header, bytes);
                Ok(())
            }
        }
    }

    fn finish_header(&self, mut header: MessageHeader, size: u64) -> MessageHeader {
        header = header.with_payload(size);
        if !self.0.config.inline_small {
            header.inline = false;
        }
        header.correlation_id = self.corr();
        header
    }

    fn push_bytes(&self, header: MessageHeader, bytes: Vec<u8>) {
        let header = self.finish_header(header, bytes.len() as u64);
        self.push(header.target_rank, header, Source::Ready(bytes));
    }

    fn push_object(&self, header: MessageHeader, h: ObjectHandle) -> Result<()> {
        let header = self.finish_header(header, h.size_bytes());
        let rt = &self.0.rt;
        let source = if self.direct() {
            Source::Grant(rt.acquire(&h, AccessMode::Read, AccessTarget::AnyValid)?)
        } else if header.inline {
            let region = rt.registry().pinned_pool().allocate(h.size_bytes() as usize);
            let task = rt.copy_to_region(&h, &region, 0)?;
            self.0.stats.lock().staging_copies += 1;
            Source::Region {
                task,
                region,
                handle: h,
            }
        } else {
            Source::Grant(rt.acquire(&h, AccessMode::Read, AccessTarget::Host)?)
        };
        self.push(header.target_rank, header, source);
        Ok(())
    }

    /// Overwrites a remote object. The owner takes write access in its
    /// dependency order, lands the bytes without fetching the old contents,
    /// then runs `completion` (if any) with the object as payload.
    pub fn hetero_put(&self, gid: GlobalObjectId, source: impl Into<Payload>, completion: HandlerId) -> Result<()> {
        self.check_open()?;
        self.check_rank(gid.owner_rank)?;
        let header = MessageHeader::new(MsgKind::PutMeta, gid.owner_rank, gid.object_id, completion);
        match source.into() {
            Payload::Object(h) => {
                if h.size_bytes() != gid.size_bytes {
                    return Err(DistError::SizeMismatch {
                        expected: gid.size_bytes,
                        got: h.size_bytes(),
                    });
                }
                self.push_object(header, h)
            }
            Payload::Bytes(b) => {
                if b.len() as u64 != gid.size_bytes {
                    return Err(DistError::SizeMismatch {
                        expected: gid.size_bytes,
                        got: b.len() as u64,
                    });
                }
                self.push_bytes(header, b);
                Ok(())
            }
            Payload::None => Err(DistError::SizeMismatch {
                expected: gid.size_bytes,
                got: 0,
            }),
        }
    }

    /// Copies a remote object into `dest`. The owner reads in its dependency
    /// order; `completion` runs here once `dest` holds the bytes.
    pub fn hetero_get(&self, gid: GlobalObjectId, dest: &ObjectHandle, completion: HandlerId) -> Result<()> {
        self.check_open()?;
        self.check_rank(gid.owner_rank)?;
        if dest.size_bytes() != gid.size_bytes {
            return Err(DistError::SizeMismatch {
                expected: gid.size_bytes,
                got: dest.size_bytes(),
            });
        }
        let local = self.publish(dest);
        let header = MessageHeader::new(MsgKind::GetReq, gid.owner_rank, gid.object_id, completion);
        self.push_bytes(header, local.object_id.to_le_bytes().to_vec());
        Ok(())
    }

    // ---- progress -----------------------------------------------------------------

    /// One runtime pass plus one network pass.
    pub fn progress(&self) -> usize {
        self.0.rt.progress() + self.network_progress()
    }

    /// Sends ready outgoing entries, receives and dispatches messages, lands
    /// puts and runs queued handlers.
    pub fn network_progress(&self) -> usize {
        let mut work = self.send_ready();
        work += self.receive();
        work += self.land_puts();
        work += self.dispatch();
        work += self.shutdown_step();
        work
    }

    fn send_ready(&self) -> usize {
        let ready: Vec<Outgoing> = {
            let mut net = self.0.net.lock();
            if net.outgoing.is_empty() {
                return 0;
            }
            let mut blocked = HashSet::new();
            let mut keep = VecDeque::with_capacity(net.outgoing.len());
            let mut ready = Vec::new();
            for e in net.outgoing.drain(..) {
                let ok = !blocked.contains(&e.dest)
                    && match &e.source {
                        Source::Ready(_) => true,
                        Source::Region { task, .. } => task.is_done(),
                        Source::Grant(g) => g.is_ready(),
                    };
                if ok {
                    ready.push(e);
                } else {
                    blocked.insert(e.dest);
                    keep.push_back(e);
                }
            }
            net.outgoing = keep;
            ready
        };
        let n = ready.len();
        for e in ready {
            if let Err(err) = self.transmit(e) {
                self.note_error(err.to_string());
            }
        }
        n
    }

    fn transmit(&self, e: Outgoing) -> Result<()> {
        let rt = &self.0.rt;
        let size = e.header.payload_size as usize;
        let (bytes, grant, object) = match e.source {
            Source::Ready(b) => (b, None, None),
            Source::Region { task, region, handle } => {
                if let Some(err) = task.error() {
                    return Err(DistError::Handler(err));
                }
                let b = region.read().as_slice()[..size].to_vec();
                (b, None, Some(handle.id()))
            }
            Source::Grant(g) => {
                if let Some(err) = g.error() {
                    return Err(DistError::Handler(err));
                }
                let loc = g.location().ok_or(DistError::Handler("grant has no location".into()))?;
                let b = match loc {
                    Location::Host { buffer, offset } => {
                        buffer.read().as_slice()[offset as usize..offset as usize + size].to_vec()
                    }
                    Location::Device { alloc, offset } => {
                        self.0.stats.lock().direct_reads += 1;
                        rt.registry().device(alloc.device_id)?.read_direct(&alloc, offset, size as u64)?
                    }
                };
                self.0.stats.lock().staging_copies += g.transfers() as u64;
                let id = g.handle().id();
                (b, Some(g), Some(id))
            }
        };
        let encoded = e.header.encode()?;
        let frames = if e.header.inline {
            let mut b = Vec::with_capacity(HEADER_LEN + bytes.len());
            b.extend_from_slice(&encoded);
            b.extend_from_slice(&bytes);
            vec![Frame::Header(b)]
        } else {
            vec![
                Frame::Header(encoded.to_vec()),
                Frame::Data {
                    correlation_id: e.header.correlation_id,
                    bytes,
                },
            ]
        };
        {
            let mut s = self.0.stats.lock();
            s.messages_sent += 1;
            if e.header.inline {
                s.inline_messages += 1;
            } else {
                s.split_messages += 1;
                s.data_messages += 1;
            }
            s.bytes_sent += frames.iter().map(|f| f.len() as u64).sum::<u64>();
        }
        let result = if e.dest == self.0.rank {
            self.0.net.lock().to_self.extend(frames);
            Ok(())
        } else {
            frames.into_iter().try_for_each(|f| self.0.transport.send(e.dest, f))
        };
        if let Some(id) = object {
            self.trace(id, "sent");
        }
        if let Some(g) = grant {
            g.release(false)?;
        }
        result
    }

    fn trace(&self, object_id: u64, action: &str) {
        let reg = self.0.rt.registry();
        reg.trace().record(TraceEvent::Object {
            object_id,
            action: action.to_string(),
            virtual_time: reg.now(),
        });
    }

    fn note_error(&self, e: String) {
        self.0.net.lock().errors.push(e);
    }

    fn receive(&self) -> usize {
        let mut n = 0;
        loop {
            let local = self.0.net.lock().to_self.pop_front();
            let next = match local {
                Some(f) => Some((self.0.rank, f)),
                None => match self.0.transport.try_recv() {
                    Ok(m) => m,
                    Err(e) => {
                        self.note_error(e.to_string());
                        None
                    }
                },
            };
            let Some((src, frame)) = next else { break };
            n += 1;
            if let Err(e) = self.on_frame(src, frame) {
                self.note_error(e.to_string());
            }
            if n >= 256 {
                break;
            }
        }
        n
    }

    fn on_frame(&self, src: u32, frame: Frame) -> Result<()> {
        match frame {
            Frame::Header(b) => {
                let h = MessageHeader::decode(&b)?;
                if h.inline {
                    let body = &b[HEADER_LEN..];
                    if body.len() as u64 != h.payload_size {
                        return Err(DistError::Wire(format!(
                            "inline payload is {} bytes, header says {}",
                            body.len(),
                            h.payload_size
                        )));
                    }
                    self.deliver(src, h, body.to_vec())
                } else {
                    self.0.net.lock().partial.insert((src, h.correlation_id), h);
                    Ok(())
                }
            }
            Frame::Data { correlation_id, bytes } => {
                let h = self
                    .0
                    .net
                    .lock()
                    .partial
                    .remove(&(src, correlation_id))
                    .ok_or_else(|| DistError::Wire(format!("data for unknown message {correlation_id}")))?;
                if bytes.len() as u64 != h.payload_size {
                    return Err(DistError::SizeMismatch {
                        expected: h.payload_size,
                        got: bytes.len() as u64,
                    });
                }
                self.deliver(src, h, bytes)
            }
        }
    }

    fn enqueue(&self, job: Job) {
        self.0.net.lock().jobs.entry(job.source).or_default().push_back(job);
    }

    fn deliver(&self, src: u32, h: MessageHeader, bytes: Vec<u8>) -> Result<()> {
        self.0.stats.lock().messages_received += 1;
        let target = MobileRef {
            owner_rank: h.target_rank,
            local_index: h.target_index,
        };
        match h.kind {
            MsgKind::Handler => self.enqueue(Job {
                source: src,
                handler: h.handler_id,
                target: Some(target),
                payload: Payload::Bytes(bytes),
            }),
            MsgKind::HandlerHeteroMeta => {
                let meta = h
                    .meta
                    .ok_or_else(|| DistError::Wire("object message without shape".into()))?;
                let obj = self.materialize(&meta, &bytes)?;
                self.enqueue(Job {
                    source: src,
                    handler: h.handler_id,
                    target: Some(target),
                    payload: Payload::Object(obj),
                });
            }
            MsgKind::PutMeta => {
                let obj = self.global(h.target_index)?;
                if obj.size_bytes() != bytes.len() as u64 {
                    return Err(DistError::SizeMismatch {
                        expected: obj.size_bytes(),
                        got: bytes.len() as u64,
                    });
                }
                let place = if self.direct() {
                    self.put_device(&obj)
                } else {
                    AccessTarget::Host
                };
                let grant = self.0.rt.acquire(&obj, AccessMode::Write, place)?;
                self.0.net.lock().puts.push(PendingPut {
                    grant,
                    bytes,
                    source: src,
                    handler: h.handler_id,
                });
            }
            MsgKind::GetReq => {
                let dest_id = u64::from_le_bytes(
                    bytes
                        .get(..8)
                        .and_then(|b| b.try_into().ok())
                        .ok_or_else(|| DistError::Wire("short get request".into()))?,
                );
                let obj = match self.global(h.target_index) {
                    Ok(o) => o,
                    Err(e) => {
                        let msg = format!("get from rank {}: {e}", self.0.rank);
                        self.push_bytes(MessageHeader::new(MsgKind::Ack, src, 0, CTRL_ERROR), msg.into_bytes());
                        return Err(e);
                    }
                };
                let reply = MessageHeader::new(MsgKind::PutMeta, src, dest_id, h.handler_id);
                let reply = MessageHeader {
                    inline: false,
                    ..reply.with_payload(obj.size_bytes())
                };
                let reply = MessageHeader {
                    correlation_id: self.corr(),
                    ..reply
                };
                let target = if self.direct() {
                    AccessTarget::AnyValid
                } else {
                    AccessTarget::Host
                };
                let grant = self.0.rt.acquire(&obj, AccessMode::Read, target)?;
                self.push(src, reply, Source::Grant(grant));
            }
            MsgKind::Ack => match h.handler_id {
                CTRL_EXCHANGE => {
                    let refs = bytes
                        .chunks_exact(12)
                        .map(|c| MobileRef {
                            owner_rank: u32::from_le_bytes(c[..4].try_into().expect("4 bytes")),
                            local_index: u64::from_le_bytes(c[4..].try_into().expect("8 bytes")),
                        })
                        .collect();
                    self.0
                        .net
                        .lock()
                        .exchange
                        .entry(h.correlation_id)
                        .or_default()
                        .insert(src, refs);
                }
                CTRL_BYE => {
                    self.0.net.lock().byes.insert(src);
                }
                CTRL_ERROR => self.note_error(String::from_utf8_lossy(&bytes).into_owned()),
                c => return Err(DistError::Wire(format!("unknown control code {c}"))),
            },
        }
        Ok(())
    }

    fn global(&self, id: u64) -> Result<ObjectHandle> {
        self.0.globals.lock().get(&id).cloned().ok_or(DistError::UnknownGlobal(id))
    }

    fn pick_gpu(&self) -> Option<DeviceId> {
        if self.0.gpus.is_empty() {
            return None;
        }
        let i = self.0.gpu_rr.fetch_add(1, Ordering::Relaxed);
        Some(self.0.gpus[i % self.0.gpus.len()])
    }

    /// Device that receives a direct put: where the object already lives,
    /// else the next GPU in turn.
    fn put_device(&self, obj: &ObjectHandle) -> AccessTarget {
        let resident = self.0.rt.copy_states(obj).ok().and_then(|s| {
            s.devices
                .iter()
                .find(|(d, st)| **st == CopyState::Valid && self.0.gpus.contains(d))
                .map(|(d, _)| *d)
        });
        match resident.or_else(|| self.pick_gpu()) {
            Some(d) => AccessTarget::Device(d),
            None => AccessTarget::Host,
        }
    }

    /// Turns a received payload into a local object, placed on a GPU when
    /// there is one. A GPU that cannot hold it leaves it on the host.
    fn materialize(&self, meta: &HeteroMeta, bytes: &[u8]) -> Result<ObjectHandle> {
        let rt = &self.0.rt;
        let desc = ObjectDesc::new(&meta.extents(), meta.element_size as u64)?;
        let size = desc.size_bytes();
        let gpu = self.pick_gpu();
        if let (true, Some(dev)) = (self.direct(), gpu) {
            let lend = self.0.cache.lend(dev, size);
            if let Ok(h) = rt.create_object_on_device(desc.clone(), dev, bytes, lend) {
                self.0.stats.lock().direct_writes += 1;
                self.trace(h.id(), "received");
                return Ok(h);
            }
        }
        let h = rt.create_object_from_host(desc, bytes)?;
        if let (false, Some(dev)) = (self.direct(), gpu) {
            let lend = self.0.cache.lend(dev, size);
            if rt.prefetch(&h, dev, lend).is_ok() {
                self.0.stats.lock().staging_copies += 1;
            }
        }
        self.trace(h.id(), "received");
        Ok(h)
    }

    fn land_puts(&self) -> usize {
        let ready: Vec<PendingPut> = {
            let mut net = self.0.net.lock();
            if net.puts.is_empty() {
                return 0;
            }
            let (ready, wait): (Vec<_>, Vec<_>) = net.puts.drain(..).partition(|p| p.grant.is_ready());
            net.puts = wait;
            ready
        };
        let n = ready.len();
        for p in ready {
            if let Err(e) = self.land(p) {
                self.note_error(e.to_string());
            }
        }
        n
    }

    fn land(&self, p: PendingPut) -> Result<()> {
        if let Some(e) = p.grant.error() {
            return Err(DistError::Handler(e));
        }
        let loc = p
            .grant
            .location()
            .ok_or(DistError::Handler("grant has no location".into()))?;
        match loc {
            Location::Host { buffer, offset } => {
                let o = offset as usize;
                buffer.write().as_mut_slice()[o..o + p.bytes.len()].copy_from_slice(&p.bytes);
            }
            Location::Device { alloc, offset } => {
                self.0
                    .rt
                    .registry()
                    .device(alloc.device_id)?
                    .write_direct(&alloc, offset, &p.bytes)?;
                self.0.stats.lock().direct_writes += 1;
            }
        }
        let obj = p.grant.handle().clone();
        p.grant.release(true)?;
        if p.handler != NO_HANDLER {
            self.enqueue(Job {
                source: p.source,
                handler: p.handler,
                target: None,
                payload: Payload::Object(obj),
            });
        }
        Ok(())
    }

    /// FIFO per source, round-robin across sources. Handlers never run
    /// re-entrantly on one node, which also serializes them per object.
    fn dispatch(&self) -> usize {
        if self.0.dispatching.swap(true, Ordering::AcqRel) {
            return 0;
        }
        let budget = self.0.net.lock().jobs.values().map(VecDeque::len).sum::<usize>();
        let mut n = 0;
        while n < budget {
            let job = {
                let mut net = self.0.net.lock();
                let start = net.next_source;
                let src = net
                    .jobs
                    .range(start..)
                    .chain(net.jobs.range(..start))
                    .find(|(_, q)| !q.is_empty())
                    .map(|(s, _)| *s);
                let Some(src) = src else { break };
                net.next_source = src.wrapping_add(1);
                net.jobs.get_mut(&src).and_then(VecDeque::pop_front)
            };
            let Some(job) = job else { break };
            n += 1;
            if let Err(e) = self.run_job(job) {
                self.0.stats.lock().handler_errors += 1;
                self.note_error(e.to_string());
            }
        }
        self.0.dispatching.store(false, Ordering::Release);
        n
    }

    fn run_job(&self, job: Job) -> Result<()> {
        let f = self
            .0
            .handlers
            .read()
            .get(job.handler as usize)
            .map(|(_, f)| f.clone())
            .ok_or(DistError::UnknownHandler(job.handler))?;
        self.0.stats.lock().handlers_run += 1;
        let Some(target) = job.target else {
            let mut ctx = HandlerCtx {
                node: self,
                source: job.source,
                target: None,
                state: None,
                payload: job.payload,
            };
            return f(&mut ctx);
        };
        if target.owner_rank != self.0.rank {
            return Err(DistError::NotOwner(target));
        }
        let mut state = {
            let mut m = self.0.mobiles.lock();
            let slot = m
                .get_mut(target.local_index as usize)
                .ok_or(DistError::UnknownMobile(target))?;
            slot.take().ok_or(DistError::Busy(target))?
        };
        let result = {
            let mut ctx = HandlerCtx {
                node: self,
                source: job.source,
                target: Some(target),
                state: Some(&mut *state),
                payload: job.payload,
            };
            f(&mut ctx)
        };
        self.0.mobiles.lock()[target.local_index as usize] = Some(state);
        result
    }

    /// Nothing queued, in flight on the network, or waiting to run.
    pub fn is_quiescent(&self) -> bool {
        self.0.net.lock().quiescent() && self.0.transport.undelivered() == 0
    }

    /// Drives the runtime and the network until `done` holds. Under the wall
    /// clock, gives up after the configured timeout.
    pub fn run_until(&self, mut done: impl FnMut() -> bool) -> Result<()> {
        let deadline = (!self.0.rt.clock().is_virtual()).then(|| Instant::now() + self.0.config.wait_timeout);
        let mut timed_out = false;
        self.0.rt.run_until(|| {
            if done() {
                return true;
            }
            if deadline.is_some_and(|d| Instant::now() > d) {
                timed_out = true;
                return true;
            }
            false
        })?;
        if timed_out {
            Err(DistError::Timeout)
        } else {
            Ok(())
        }
    }

    /// Waits for this node's queues to drain.
    pub fn flush(&self) -> Result<()> {
        self.run_until(|| self.is_quiescent())
    }

    // ---- shutdown ---------------------------------------------------------------

    /// Starts the collective shutdown: once local queues drain, a goodbye goes
    /// to every peer; the node closes after hearing from all of them.
    pub fn begin_shutdown(&self) {
        self.0.closing.store(true, Ordering::Release);
    }

    pub fn is_shut_down(&self) -> bool {
        self.0.shut.load(Ordering::Acquire)
    }

    /// Flushes, drains handlers and closes the transport.
    pub fn shutdown(&self) -> Result<()> {
        if self.is_shut_down() {
            return Ok(());
        }
        self.begin_shutdown();
        self.run_until(|| self.is_shut_down())
    }

    fn shutdown_step(&self) -> usize {
        if !self.0.closing.load(Ordering::Acquire) || self.is_shut_down() {
            return 0;
        }
        let send_bye = {
            let mut net = self.0.net.lock();
            if !net.quiescent() {
                return 0;
            }
            if net.bye_sent {
                if net.byes.len() + 1 < self.0.world as usize {
                    return 0;
                }
                drop(net);
                self.0.shut.store(true, Ordering::Release);
                self.0.transport.close();
                return 1;
            }
            net.bye_sent = true;
            true
        };
        if send_bye {
            for peer in (0..self.0.world).filter(|&p| p != self.0.rank) {
                let h = MessageHeader::new(MsgKind::Ack, peer, 0, CTRL_BYE);
                self.push_bytes(h, Vec::new());
            }
        }
        1
    }
}

/// Fills in the shape fields of an object message.
fn header_meta(header: &mut MessageHeader, node: &Node, h: &ObjectHandle) -> Result<MessageHeader> {
    let on_device = node
        .runtime()
        .copy_states(h)?
        .valid_places()
        .iter()
        .any(|p| matches!(p, Place::Device(_)));
    let ty = if on_device { DeviceType::GpuSim } else { DeviceType::Host };
    header.meta = Some(HeteroMeta::new(h.desc().elem_size, &h.desc().dims, ty)?);
    Ok(*header)
}

#[derive(Clone)]
pub(crate) struct WeakNode(Weak<NodeInner>);

impl WeakNode {
    pub(crate) fn upgrade(&self) -> Option<Node> {
        self.0.upgrade().map(Node)
    }
}
