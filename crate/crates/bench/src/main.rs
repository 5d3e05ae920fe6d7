use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hrt_bench::jacobi::checksum;
use hrt_bench::{
    pingpong_csv, run_dgemm_bench, run_jacobi3d, run_pingpong, serial_reference, steps_csv, write_report,
    DgemmConfig, JacobiConfig, PingPongConfig, PingPongTransport,
};
use hrt_device::ClockMode;

#[derive(Parser)]
#[command(name = "hrt-bench", about = "Benchmarks for the heterogeneous runtime")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Clock for the run. Loopback runs need the virtual clock, TCP runs
    /// the wall clock.
    #[arg(long, global = true, value_enum)]
    clock: Option<ClockArg>,
    /// Write results here: JSON when the name ends in .json, CSV otherwise.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    /// Write the device timeline here as JSON.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Virtual,
    Wall,
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Staging,
    Direct,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Loopback,
    Tcp,
}

#[derive(Subcommand)]
enum Cmd {
    /// GPU-to-GPU round trips between two ranks.
    Pingpong {
        /// Message sizes in bytes, comma separated; `a..b` expands to the
        /// powers of two between a and b.
        #[arg(long, default_value = "8..8388608")]
        sizes: String,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, value_enum, default_value = "staging")]
        path: PathArg,
        #[arg(long, value_enum, default_value = "loopback")]
        transport: TransportArg,
    },
    /// Pipelined matrix multiplications over streams and devices.
    Dgemm {
        /// Matrix sizes, comma separated.
        #[arg(long, default_value = "64,128,256")]
        n: String,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        devices: usize,
        #[arg(long, default_value_t = hrt_device::DEFAULT_COMPUTE_STREAMS)]
        streams: usize,
        /// Fixed kernel time in seconds instead of the flop model.
        #[arg(long)]
        kernel_seconds: Option<f64>,
        /// Shared host bus bandwidth in bytes per second.
        #[arg(long)]
        shared_bus: Option<f64>,
    },
    /// Jacobi3D stencil on loopback ranks.
    Jacobi3d {
        /// Interior cells as X,Y,Z.
        #[arg(long, default_value = "64,64,64")]
        domain: String,
        /// Chunk grid before over-decomposition, as X,Y,Z.
        #[arg(long, default_value = "2,2,2")]
        grid: String,
        #[arg(long, default_value_t = 1)]
        ranks: usize,
        #[arg(long, default_value_t = 1)]
        devices: usize,
        #[arg(long, default_value_t = hrt_device::DEFAULT_COMPUTE_STREAMS)]
        streams: usize,
        #[arg(long, default_value_t = 1)]
        od: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, value_enum, default_value = "staging")]
        path: PathArg,
        /// Compare the result and every halo with a serial run.
        #[arg(long)]
        check: bool,
    },
}

fn parse_sizes(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| format!("bad size `{a}`"))?;
        let b: u64 = b.trim().parse().map_err(|_| format!("bad size `{b}`"))?;
        if a == 0 || a > b {
            return Err(format!("bad size range `{s}`"));
        }
        let mut v = Vec::new();
        let mut x = a;
        while x <= b {
            v.push(x);
            x *= 2;
        }
        return Ok(v);
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad size `{x}`")))
        .collect()
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad value `{x}` in `{s}`")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected three values, got `{s}`"))
}

fn run(cli: Cli) -> hrt_bench::Result<()> {
    match cli.cmd {
        Cmd::Pingpong {
            sizes,
            iters,
            path,
            transport,
        } => {
            let transport = match transport {
                TransportArg::Loopback => PingPongTransport::Loopback,
                TransportArg::Tcp => PingPongTransport::Tcp,
            };
            match (transport, cli.clock) {
                (PingPongTransport::Loopback, Some(ClockArg::Wall)) => {
                    return Err("loopback ping-pong runs under the virtual clock".into())
                }
                (PingPongTransport::Tcp, Some(ClockArg::Virtual)) => {
                    return Err("TCP ping-pong runs under the wall clock".into())
                }
                _ => {}
            }
            if cli.trace.is_some() {
                return Err("ping-pong does not record a timeline".into());
            }
            let cfg = PingPongConfig {
                sizes: parse_sizes(&sizes)?,
                iters,
                device_aware: matches!(path, PathArg::Direct),
                transport,
                ..PingPongConfig::default()
            };
            let r = run_pingpong(&cfg)?;
            let csv = pingpong_csv(&r.rows);
            print!("{csv}");
            if let Some(p) = &cli.report {
                write_report(p, &csv, &r)?;
            }
        }
        Cmd::Dgemm {
            n,
            iters,
            devices,
            streams,
            kernel_seconds,
            shared_bus,
        } => {
            let sizes = parse_sizes(&n)?;
            let multi = sizes.len() > 1;
            for n in sizes {
                let cfg = DgemmConfig {
                    n: n as usize,
                    iterations: iters,
                    devices,
                    streams,
                    kernel_seconds,
                    shared_bus,
                    clock: match cli.clock {
                        Some(ClockArg::Wall) => ClockMode::Wall,
                        _ => ClockMode::Virtual,
                    },
                    compute_all: n <= 256,
                    ..DgemmConfig::default()
                };
                let r = run_dgemm_bench(&cfg)?;
                println!(
                    "n={n} devices={devices} streams={streams} makespan_s={:.9e} verified={}",
                    r.makespan_s, r.verified
                );
                let csv = steps_csv(&r.steps);
                if let Some(p) = &cli.report {
                    write_report(&suffixed(p, multi, n), &csv, &r)?;
                }
                if let Some(p) = &cli.trace {
                    std::fs::write(suffixed(p, multi, n), r.timeline.to_json())?;
                }
                if !r.verified {
                    return Err(format!("n={n}: result does not match the reference").into());
                }
            }
        }
        Cmd::Jacobi3d {
            domain,
            grid,
            ranks,
            devices,
            streams,
            od,
            steps,
            path,
            check,
        } => {
            if matches!(cli.clock, Some(ClockArg::Wall)) {
                return Err("Jacobi3D runs under the virtual clock".into());
            }
            let cfg = JacobiConfig {
                domain: parse_triple(&domain)?,
                grid: parse_triple(&grid)?,
                ranks,
                devices,
                streams,
                od,
                steps,
                device_aware: matches!(path, PathArg::Direct),
                check,
                ..JacobiConfig::default()
            };
            let r = run_jacobi3d(&cfg)?;
            println!(
                "chunks={} makespan_s={:.9e} checksum={:.17e}",
                r.chunks, r.makespan_s, r.checksum
            );
            if check {
                let reference = serial_reference(cfg.domain, cfg.steps);
                let same = r.field == reference;
                println!(
                    "reference_checksum={:.17e} bitwise_equal={same} halos_checked={} halo_mismatches={}",
                    checksum(&reference),
                    r.halos_checked,
                    r.halo_mismatches
                );
                if !same || r.halo_mismatches > 0 {
                    return Err("result differs from the serial reference".into());
                }
            }
            let csv = steps_csv(&r.steps);
            if let Some(p) = &cli.report {
                write_report(p, &csv, &r)?;
            }
            if let Some(p) = &cli.trace {
                let json = serde_json::to_string_pretty(&r.timelines)?;
                std::fs::write(p, json)?;
            }
        }
    }
    Ok(())
}

/// `out.csv` becomes `out_n128.csv` when several sizes share one path.
fn suffixed(p: &std::path::Path, multi: bool, n: u64) -> PathBuf {
    if !multi {
        return p.to_path_buf();
    }
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match p.extension() {
        Some(e) => format!("{stem}_n{n}.{}", e.to_string_lossy()),
        None => format!("{stem}_n{n}"),
    };
    p.with_file_name(name)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
