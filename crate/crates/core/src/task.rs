use std::sync::Arc;

use hrt_device::{CompletionToken, DeviceAllocation, DeviceId, DeviceType, HostBuffer, ThreadGeometry};

use crate::app::KernelDefinition;
use crate::{AccessMode, AllocationReturn, ObjectId, Place};

pub type TaskId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskState {
    Submitted,
    Blocked,
    Runnable,
    Issued,
    Running,
    Complete,
    /// Terminal: the body, a prerequisite or validation failed.
    Failed,
}

impl TaskState {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Submitted => "submitted",
            TaskState::Blocked => "blocked",
            TaskState::Runnable => "runnable",
            TaskState::Issued => "issued",
            TaskState::Running => "running",
            TaskState::Complete => "complete",
            TaskState::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Complete | TaskState::Failed)
    }
}

/// Where an access operation wants the object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessTarget {
    Host,
    Device(DeviceId),
    /// Any accelerator: one already holding a copy, else round-robin.
    AnyDevice,
    /// Wherever a VALID copy already is (accelerators first), no transfer.
    AnyValid,
}

/// Device memory lent to an object for its first copy on that device.
#[derive(Clone)]
pub struct LentAllocation {
    pub alloc: DeviceAllocation,
    pub lender: Arc<dyn AllocationReturn>,
}

#[derive(Clone, Default)]
pub(crate) enum OpKind {
    Kernel {
        def: Arc<KernelDefinition>,
        geometry: ThreadGeometry,
        device_type: DeviceType,
        scratch: usize,
    },
    Access {
        target: AccessTarget,
        lease: bool,
        auto_release: bool,
        lend: Option<LentAllocation>,
    },
    CopyOut {
        region: HostBuffer,
        offset: u64,
    },
    #[default]
    Empty,
}

/// Internal record for kernel tasks and runtime pseudo-tasks alike. Boxed and
/// recycled through the per-thread request pool.
#[derive(Default)]
pub(crate) struct Op {
    pub id: TaskId,
    pub kind: OpKind,
    pub args: Vec<(ObjectId, AccessMode)>,
    pub explicit: Vec<TaskId>,
    pub deps: Vec<TaskId>,
    pub state: Option<TaskState>,
    pub device: Option<DeviceId>,
    pub place: Option<Place>,
    pub stream: usize,
    pub token: Option<CompletionToken>,
    /// Host<->device copies enqueued on this op's behalf.
    pub transfers: u32,
}

impl Op {
    pub fn reset(&mut self, id: TaskId, kind: OpKind) {
        self.id = id;
        self.kind = kind;
        self.args.clear();
        self.explicit.clear();
        self.deps.clear();
        self.state = Some(TaskState::Submitted);
        self.device = None;
        self.place = None;
        self.stream = 0;
        self.token = None;
        self.transfers = 0;
    }

    pub fn state(&self) -> TaskState {
        self.state.unwrap_or(TaskState::Submitted)
    }

    pub fn is_kernel(&self) -> bool {
        matches!(self.kind, OpKind::Kernel { .. })
    }

    pub fn device_type(&self) -> Option<DeviceType> {
        match &self.kind {
            OpKind::Kernel { device_type, .. } => Some(*device_type),
            _ => None,
        }
    }

    /// Where kernel arguments must be VALID once a device is chosen.
    pub fn kernel_place(&self) -> Option<Place> {
        match (&self.kind, self.device) {
            (OpKind::Kernel { device_type: DeviceType::Host, .. }, Some(_)) => Some(Place::Host),
            (OpKind::Kernel { .. }, Some(d)) => Some(Place::Device(d)),
            _ => None,
        }
    }
}
