use std::collections::{HashMap, VecDeque};
use std::str::FromStr;

use hrt_device::{DeviceId, DeviceType};

use crate::TaskId;

/// A kernel task whose prerequisites have completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadyTask {
    pub id: TaskId,
    pub device_type: DeviceType,
}

/// What a policy may ask the runtime while choosing a placement.
pub trait SchedContext {
    /// Devices of the given type in id order.
    fn devices(&self, ty: DeviceType) -> Vec<DeviceId>;
    /// Tasks issued to `device` that have not completed.
    fn outstanding(&self, device: DeviceId) -> usize;
    /// Bytes of the task's arguments that are already VALID on `device`.
    fn valid_bytes(&self, task: TaskId, device: DeviceId) -> u64;
}

/// Placement policy. `pop` hands back the next task and the device it runs on.
pub trait Scheduler: Send {
    fn name(&self) -> &'static str;
    fn push(&mut self, task: ReadyTask);
    fn pop(&mut self, ctx: &dyn SchedContext) -> Option<(TaskId, DeviceId)>;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SchedulerKind {
    Fifo,
    LeastLoaded,
    #[default]
    Locality,
}

impl FromStr for SchedulerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "fifo" => Ok(Self::Fifo),
            "least-loaded" | "leastloaded" => Ok(Self::LeastLoaded),
            "locality" => Ok(Self::Locality),
            other => Err(format!("unknown scheduler `{other}`")),
        }
    }
}

impl SchedulerKind {
    pub fn build(self) -> Box<dyn Scheduler> {
        match self {
            Self::Fifo => Box::new(FifoScheduler::default()),
            Self::LeastLoaded => Box::new(LeastLoadedScheduler::default()),
            Self::Locality => Box::new(LocalityScheduler::default()),
        }
    }
}

/// Submission order; devices of the requested type in round-robin.
#[derive(Debug, Default)]
pub struct FifoScheduler {
    queue: VecDeque<ReadyTask>,
    next: HashMap<DeviceType, usize>,
}

impl Scheduler for FifoScheduler {
    fn name(&self) -> &'static str {
        "fifo"
    }

    fn push(&mut self, task: ReadyTask) {
        self.queue.push_back(task);
    }

    fn pop(&mut self, ctx: &dyn SchedContext) -> Option<(TaskId, DeviceId)> {
        let t = self.queue.pop_front()?;
        let devs = ctx.devices(t.device_type);
        if devs.is_empty() {
            self.queue.push_front(t);
            return None;
        }
        let n = self.next.entry(t.device_type).or_default();
        let d = devs[*n % devs.len()];
        *n += 1;
        Some((t.id, d))
    }

    fn len(&self) -> usize {
        self.queue.len()
    }
}

/// Submission order; the device with the fewest outstanding tasks.
#[derive(Debug, Default)]
pub struct LeastLoadedScheduler {
    queue: VecDeque<ReadyTask>,
}

impl Scheduler for LeastLoadedScheduler {
    fn name(&self) -> &'static str {
        "least-loaded"
    }

    fn push(&mut self, task: ReadyTask) {
        self.queue.push_back(task);
    }

    fn pop(&mut self, ctx: &dyn SchedContext) -> Option<(TaskId, DeviceId)> {
        let t = self.queue.pop_front()?;
        match ctx.devices(t.device_type).into_iter().min_by_key(|&d| (ctx.outstanding(d), d)) {
            Some(d) => Some((t.id, d)),
            None => {
                self.queue.push_front(t);
                None
            }
        }
    }

    fn len(&self) -> usize {
        self.queue.len()
    }
}

/// Submission order; the device already holding the most argument bytes,
/// then the least loaded, then the lowest id.
#[derive(Debug, Default)]
pub struct LocalityScheduler {
    queue: VecDeque<ReadyTask>,
}

impl Scheduler for LocalityScheduler {
    fn name(&self) -> &'static str {
        "locality"
    }

    fn push(&mut self, task: ReadyTask) {
        self.queue.push_back(task);
    }

    fn pop(&mut self, ctx: &dyn SchedContext) -> Option<(TaskId, DeviceId)> {
        let t = self.queue.pop_front()?;
        let best = ctx
            .devices(t.device_type)
            .into_iter()
            .min_by_key(|&d| (std::cmp::Reverse(ctx.valid_bytes(t.id, d)), ctx.outstanding(d), d));
        match best {
            Some(d) => Some((t.id, d)),
            None => {
                self.queue.push_front(t);
                None
            }
        }
    }

    fn len(&self) -> usize {
        self.queue.len()
    }
}
