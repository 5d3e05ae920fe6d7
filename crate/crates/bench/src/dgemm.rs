//! Multi-stream, multi-device DGEMM pipeline.
//!
//! Each iteration ships two fresh input matrices to a device and multiplies
//! them there. Results stay on the device; only the last one is read back to
//! check it.

use std::sync::Arc;

use hrt_core::{ObjectDesc, Runtime};
use hrt_device::{ClockMode, DeviceDescriptor, DeviceRegistry, DeviceType, TraceRecorder, DEFAULT_COMPUTE_STREAMS, MIB};
use serde::Serialize;

use crate::kernels::{dgemm_host, register_dgemm};
use crate::report::StepRow;
use crate::timeline::{emit_timeline, Timeline};
use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct DgemmConfig {
    pub n: usize,
    pub iterations: usize,
    pub devices: usize,
    pub streams: usize,
    pub link_latency: f64,
    pub link_bandwidth: f64,
    /// Fixed kernel duration; when unset the kernel is charged
    /// `2 n^3 / flop_rate`.
    pub kernel_seconds: Option<f64>,
    pub flop_rate: f64,
    /// Caps the combined host link bandwidth of all devices.
    pub shared_bus: Option<f64>,
    #[serde(skip)]
    pub clock: ClockMode,
    /// Multiply in every iteration rather than only the checked last one.
    pub compute_all: bool,
    pub device_memory: u64,
}

impl Default for DgemmConfig {
    fn default() -> Self {
        Self {
            n: 64,
            iterations: 100,
            devices: 1,
            streams: DEFAULT_COMPUTE_STREAMS,
            link_latency: 10e-6,
            link_bandwidth: 10e9,
            kernel_seconds: None,
            flop_rate: 5e12,
            shared_bus: None,
            clock: ClockMode::Virtual,
            compute_all: true,
            device_memory: 1024 * MIB,
        }
    }
}

impl DgemmConfig {
    pub fn matrix_bytes(&self) -> u64 {
        (self.n * self.n * 8) as u64
    }

    /// Modelled time to move one input matrix to a device.
    pub fn transfer_time(&self) -> f64 {
        self.link_latency + self.matrix_bytes() as f64 / self.link_bandwidth
    }

    pub fn kernel_time(&self) -> f64 {
        self.kernel_seconds
            .unwrap_or_else(|| 2.0 * (self.n as f64).powi(3) / self.flop_rate)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DgemmReport {
    pub config: DgemmConfig,
    pub makespan_s: f64,
    /// Completion time of each iteration's kernel, relative to the start.
    pub steps: Vec<StepRow>,
    pub kernels_per_device: Vec<usize>,
    pub h2d_transfers: u64,
    pub d2h_transfers: u64,
    pub verified: bool,
    #[serde(skip)]
    pub timeline: Timeline,
}

/// Makespan predicted by list-scheduling the pipeline: iteration `i` goes to
/// device `i % devices`, its two inputs queue on that device's host-to-device
/// lane, and the kernel runs on the next stream in round-robin once both
/// inputs have landed.
pub fn pipeline_model(iterations: usize, devices: usize, streams: usize, transfer: f64, kernel: f64) -> f64 {
    let mut h2d = vec![0.0f64; devices];
    let mut stream_free = vec![vec![0.0f64; streams]; devices];
    let mut rr = vec![0usize; devices];
    let mut makespan = 0.0f64;
    for i in 0..iterations {
        let d = i % devices;
        h2d[d] += 2.0 * transfer;
        let s = rr[d] % streams;
        rr[d] += 1;
        let start = h2d[d].max(stream_free[d][s]);
        stream_free[d][s] = start + kernel;
        makespan = makespan.max(start + kernel);
    }
    makespan
}

fn matrix(n: usize, seed: usize) -> Vec<f64> {
    // Small integers keep every product exact in any summation order.
    (0..n * n)
        .map(|x| {
            let (i, j) = (x / n, x % n);
            ((i * 7 + j * 3 + seed * 5) % 11) as f64 - 5.0
        })
        .collect()
}

pub fn run_dgemm_bench(cfg: &DgemmConfig) -> Result<DgemmReport> {
    if cfg.n == 0 || cfg.iterations == 0 || cfg.devices == 0 || cfg.streams == 0 {
        return Err("n, iterations, devices and streams must be positive".into());
    }
    let trace = TraceRecorder::enabled();
    let reg = DeviceRegistry::builder()
        .clock_mode(cfg.clock)
        .trace(trace.clone())
        .shared_bus(cfg.shared_bus)
        .build();
    reg.register(DeviceDescriptor::host(0))?;
    for d in 1..=cfg.devices as u32 {
        reg.register(
            DeviceDescriptor::gpu_sim(d, cfg.device_memory)
                .with_streams(cfg.streams)
                .with_link(cfg.link_latency, cfg.link_bandwidth),
        )?;
    }
    let rt = Runtime::new(Arc::new(reg));
    let k = cfg.kernel_time();
    let (full, timing) = register_dgemm(&rt, move |_| k)?;

    let n = cfg.n;
    let desc = ObjectDesc::of::<f64>(&[(n * n) as u64])?;
    let start = rt.now();
    let mut tasks = Vec::with_capacity(cfg.iterations);
    let mut last = None;
    for i in 0..cfg.iterations {
        let is_last = i + 1 == cfg.iterations;
        let a = rt.create_object_from_host(desc.clone(), bytemuck::cast_slice(&matrix(n, i)))?;
        let b = rt.create_object_from_host(desc.clone(), bytemuck::cast_slice(&matrix(n, i + 1)))?;
        let c = rt.create::<f64>(&[(n * n) as u64])?;
        let kernel = if cfg.compute_all || is_last { full } else { timing };
        let t = rt
            .task()
            .reads(&a)
            .reads(&b)
            .writes(&c)
            .set_threads([n as u32, 1, 1], [1, 1, 1])
            .device(DeviceType::GpuSim)
            .submit(kernel)?;
        tasks.push(t.id());
        if is_last {
            last = Some((c, i));
        }
    }
    rt.wait_all()?;
    let makespan = rt.now() - start;

    let timeline = emit_timeline(&trace.events());
    let ends = timeline.kernel_ends();
    let steps = tasks
        .iter()
        .enumerate()
        .map(|(step, id)| StepRow {
            step,
            virtual_makespan_s: ends.get(id).map_or(f64::NAN, |e| e - start),
        })
        .collect();
    let kernels_per_device = timeline
        .devices
        .iter()
        .filter(|d| d.device != 0)
        .map(|d| {
            d.lanes
                .iter()
                .flat_map(|l| &l.intervals)
                .filter(|i| i.kind == hrt_device::IntervalKind::Kernel)
                .count()
        })
        .collect();
    let stats = rt.stats();

    let (c, i) = last.expect("at least one iteration");
    let v = rt.request_data(&c, true, false)?.wait()?;
    let got: Vec<f64> = v.to_vec();
    rt.release(&c)?;
    let mut expect = vec![0.0; n * n];
    dgemm_host(n, &matrix(n, i), &matrix(n, i + 1), &mut expect);

    Ok(DgemmReport {
        config: cfg.clone(),
        makespan_s: makespan,
        steps,
        kernels_per_device,
        h2d_transfers: stats.host_to_device,
        d2h_transfers: stats.device_to_host,
        verified: got == expect,
        timeline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_single_stream_is_kernel_bound() {
        // 2t of transfer per iteration, kernels of 4t back to back.
        let m = pipeline_model(10, 1, 1, 1.0, 4.0);
        assert!((m - (2.0 + 40.0)).abs() < 1e-12);
    }

    #[test]
    fn model_many_streams_is_transfer_bound() {
        let m = pipeline_model(10, 1, 5, 1.0, 4.0);
        assert!((m - (20.0 + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn model_splits_across_devices() {
        let m = pipeline_model(100, 4, 5, 1.0, 1.0);
        assert!((m - 51.0).abs() < 1e-12);
    }
}
