use hrt_device::{DeviceType, ThreadGeometry};

use crate::app::KernelRef;
use crate::{AccessMode, CoreError, HeteroTask, ObjectHandle, Result, Runtime, TaskHandle, TaskId};

/// Assembles a task: arguments with access modes, thread geometry, target
/// device type (required), scratch size and explicit prerequisites.
pub struct TaskBuilder<'rt> {
    rt: &'rt Runtime,
    args: Vec<(ObjectHandle, AccessMode)>,
    geometry: ThreadGeometry,
    device_type: Option<DeviceType>,
    scratch: usize,
    deps: Vec<TaskId>,
    error: Option<CoreError>,
}

/// Sets the access mode of the argument just added.
pub struct ArgBuilder<'b, 'rt> {
    builder: &'b mut TaskBuilder<'rt>,
    index: usize,
}

impl<'b, 'rt> ArgBuilder<'b, 'rt> {
    fn mode(self, m: AccessMode) -> Self {
        self.builder.args[self.index].1 = m;
        self
    }

    pub fn read(self) -> Self {
        self.mode(AccessMode::Read)
    }

    pub fn write(self) -> Self {
        self.mode(AccessMode::Write)
    }

    pub fn read_write(self) -> Self {
        self.mode(AccessMode::ReadWrite)
    }

    /// Accepted for source compatibility; has no effect.
    pub fn dim_x(self) -> Self {
        self
    }

    pub fn done(self) -> &'b mut TaskBuilder<'rt> {
        self.builder
    }
}

impl<'rt> TaskBuilder<'rt> {
    pub(crate) fn new(rt: &'rt Runtime) -> Self {
        Self {
            rt,
            args: Vec::new(),
            geometry: ThreadGeometry::default(),
            device_type: None,
            scratch: 0,
            deps: Vec::new(),
            error: None,
        }
    }

    /// Adds an argument, read-write unless a mode is chosen.
    pub fn arg(&mut self, h: &ObjectHandle) -> ArgBuilder<'_, 'rt> {
        self.args.push((h.clone(), AccessMode::ReadWrite));
        let index = self.args.len() - 1;
        ArgBuilder { builder: self, index }
    }

    pub fn reads(&mut self, h: &ObjectHandle) -> &mut Self {
        self.arg(h).read();
        self
    }

    pub fn writes(&mut self, h: &ObjectHandle) -> &mut Self {
        self.arg(h).write();
        self
    }

    pub fn reads_writes(&mut self, h: &ObjectHandle) -> &mut Self {
        self.arg(h).read_write();
        self
    }

    pub fn set_threads(&mut self, groups: [u32; 3], local: [u32; 3]) -> &mut Self {
        match ThreadGeometry::new(groups, local) {
            Ok(g) => self.geometry = g,
            Err(e) => self.error = Some(e.into()),
        }
        self
    }

    pub fn device(&mut self, ty: DeviceType) -> &mut Self {
        self.device_type = Some(ty);
        self
    }

    /// Zero-initialised scratch bytes handed to the kernel body.
    pub fn scratch(&mut self, bytes: usize) -> &mut Self {
        self.scratch = bytes;
        self
    }

    pub fn depends_on(&mut self, t: TaskId) -> &mut Self {
        if !self.deps.contains(&t) {
            self.deps.push(t);
        }
        self
    }

    pub fn build(&mut self, kernel: KernelRef) -> Result<HeteroTask> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        let device_type = self.device_type.ok_or(CoreError::MissingDeviceType)?;
        for (i, (h, _)) in self.args.iter().enumerate() {
            if self.args[..i].iter().any(|(o, _)| o.id() == h.id()) {
                return Err(CoreError::DuplicateArgument(h.id()));
            }
        }
        Ok(HeteroTask {
            id: self.rt.next_task_id(),
            kernel,
            args: std::mem::take(&mut self.args),
            geometry: self.geometry,
            device_type,
            scratch: self.scratch,
            deps: std::mem::take(&mut self.deps),
        })
    }

    pub fn submit(&mut self, kernel: KernelRef) -> Result<TaskHandle> {
        let t = self.build(kernel)?;
        self.rt.submit(t)
    }
}
