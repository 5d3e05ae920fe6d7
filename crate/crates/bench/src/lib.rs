//! Benchmarks for the heterogeneous runtime: GPU-to-GPU ping-pong over the
//! messaging layer, a multi-stream DGEMM pipeline and a distributed Jacobi3D
//! stencil with over-decomposition.
//!
//! Every runner returns a report with virtual-time measurements and the
//! device timeline it was built from. The `hrt-bench` binary wraps them.

pub mod dgemm;
pub mod jacobi;
pub mod kernels;
pub mod pingpong;
pub mod report;
pub mod timeline;

pub use pingpong::{run_pingpong, PingPongConfig, PingPongReport, PingPongTransport};
pub use jacobi::{run_jacobi3d, serial_reference, JacobiConfig, JacobiReport};
pub use dgemm::{pipeline_model, run_dgemm_bench, DgemmConfig, DgemmReport};
pub use report::{pingpong_csv, steps_csv, write_report, PingPongRow, StepRow};
pub use timeline::{emit_timeline, Timeline};

pub type Error = Box<dyn std::error::Error + Send + Sync>;
pub type Result<T> = std::result::Result<T, Error>;
