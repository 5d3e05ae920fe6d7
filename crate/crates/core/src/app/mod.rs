//! Application-facing kernel registration and task construction.

mod builder;
mod kernel;

pub use builder::{ArgBuilder, TaskBuilder};
pub use kernel::{CostFn, KernelDefinition, KernelRef, KernelRegistry};
