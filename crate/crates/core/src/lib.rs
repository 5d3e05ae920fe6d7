//! Heterogeneous tasking runtime.
//!
//! Objects are logical arrays that may have a copy on the host and on each
//! accelerator; the runtime keeps those copies coherent. Tasks name the
//! objects they touch and how, and the runtime infers ordering from that,
//! moves data where the chosen device needs it, and evicts idle copies when
//! device memory runs short.
//!
//! ```
//! use std::sync::Arc;
//! use hrt_core::{KernelDefinition, Runtime, RuntimeConfig};
//! use hrt_device::{DeviceDescriptor, DeviceRegistry, DeviceType, MIB};
//!
//! let reg = Arc::new(DeviceRegistry::builder().build());
//! reg.register(DeviceDescriptor::gpu_sim(0, 64 * MIB)).unwrap();
//! let rt = Runtime::with_config(reg, RuntimeConfig::default());
//! let inc = rt
//!     .register_kernel(KernelDefinition::new("inc").gpu(|inv| {
//!         for x in inv.args[0].as_mut_slice::<u32>() {
//!             *x += 1;
//!         }
//!         Ok(())
//!     }))
//!     .unwrap();
//! let v = rt.create::<u32>(&[4]).unwrap();
//! rt.task().reads_writes(&v).device(DeviceType::GpuSim).submit(inc).unwrap();
//! let view = rt.request_data(&v, true, false).unwrap().wait().unwrap();
//! assert_eq!(view.to_vec::<u32>(), vec![1; 4]);
//! rt.release(&v).unwrap();
//! ```

pub mod app;
mod deps;
mod engine;
mod error;
mod object;
pub mod pool;
mod runtime;
pub mod scheduler;
mod task;

pub use app::{KernelDefinition, KernelRef, TaskBuilder};
pub use deps::DependencyTracker;
pub use engine::RuntimeStats;
pub use error::{CoreError, Result};
pub use object::{
    AccessMode, AllocationReturn, CopyState, CopyStates, ObjectDesc, ObjectHandle, ObjectId, Place,
};
pub use runtime::{
    AccessGrant, CoProgress, HeteroTask, HostFuture, HostView, Runtime, RuntimeConfig, TaskHandle,
};
pub use scheduler::{Scheduler, SchedulerKind};
pub use task::{AccessTarget, LentAllocation, TaskId, TaskState};
