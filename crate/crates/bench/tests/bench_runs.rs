use hrt_bench::kernels::ChunkShape;
use hrt_bench::{
    pipeline_model, run_dgemm_bench, run_jacobi3d, run_pingpong, serial_reference, DgemmConfig, JacobiConfig,
    PingPongConfig,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Packing a face and unpacking it on the opposite side of a neighbour
    // moves exactly that plane and nothing else.
    #[test]
    fn halo_exchange_touches_only_the_ghost_plane(
        n in (1usize..6, 1usize..6, 1usize..6),
        face in 0usize..6,
        seed in any::<u32>(),
    ) {
        let s = ChunkShape { n: [n.0, n.1, n.2] };
        let a: Vec<f64> = (0..s.padded_len()).map(|i| ((i as u64 * 2654435761) ^ seed as u64) as f64).collect();
        let mut b = vec![-1.0; s.padded_len()];
        let mut halo = vec![0.0; s.face_len(face)];
        s.pack(&a, face, &mut halo);
        let before = b.clone();
        s.unpack(&mut b, face ^ 1, &halo);
        let changed = b.iter().zip(&before).filter(|(x, y)| x != y).count();
        prop_assert!(changed <= s.face_len(face));
        let (da, db) = s.plane_dims(face);
        let src = if face % 2 == 0 { 1 } else { s.axis_len(face) };
        let dst = if face % 2 == 0 { s.axis_len(face) + 1 } else { 0 };
        for x in 0..da {
            for y in 0..db {
                prop_assert_eq!(b[s.plane_idx(face, dst, x, y)], a[s.plane_idx(face, src, x, y)]);
            }
        }
    }

    #[test]
    fn pipeline_model_never_gets_worse_with_more_resources(
        iters in 1usize..200,
        devices in 1usize..5,
        streams in 1usize..6,
        t in 1e-6f64..1e-3,
        k in 1e-6f64..1e-3,
    ) {
        let base = pipeline_model(iters, devices, streams, t, k);
        prop_assert!(pipeline_model(iters, devices, streams + 1, t, k) <= base * (1.0 + 1e-12));
        // Lower bounds: one kernel after its inputs, and the busiest lane.
        prop_assert!(base >= 2.0 * t + k - 1e-15);
        let per_device = iters.div_ceil(devices) as f64;
        prop_assert!(base >= per_device * 2.0 * t - 1e-12);
        prop_assert!(base >= (per_device / streams as f64).ceil() * k - 1e-12);
    }

    #[test]
    fn dgemm_runtime_follows_the_model(
        iters in 1usize..40,
        devices in 1usize..4,
        streams in 1usize..6,
        ratio in 0.25f64..6.0,
    ) {
        let base = DgemmConfig { n: 16, iterations: iters, devices, streams, ..DgemmConfig::default() };
        let t = base.transfer_time();
        let cfg = DgemmConfig { kernel_seconds: Some(ratio * t), ..base };
        let r = run_dgemm_bench(&cfg).unwrap();
        prop_assert!(r.verified);
        let model = pipeline_model(iters, devices, streams, t, ratio * t);
        prop_assert!((r.makespan_s - model).abs() <= 1e-9 * model, "{} vs {}", r.makespan_s, model);
    }
}

#[test]
fn dgemm_report_counts_transfers() {
    let cfg = DgemmConfig {
        n: 32,
        iterations: 12,
        devices: 2,
        ..DgemmConfig::default()
    };
    let r = run_dgemm_bench(&cfg).unwrap();
    assert!(r.verified);
    assert_eq!(r.kernels_per_device, vec![6, 6]);
    assert_eq!(r.h2d_transfers, 24);
    assert_eq!(r.steps.len(), 12);
    assert!(r.steps.windows(2).all(|w| w[0].virtual_makespan_s <= w[1].virtual_makespan_s));
    assert!(r.timeline.lanes_are_serial());
}

#[test]
fn small_pingpong_round_trips() {
    for device_aware in [false, true] {
        let cfg = PingPongConfig {
            sizes: vec![8, 4096, 1 << 20],
            iters: 3,
            device_aware,
            ..PingPongConfig::default()
        };
        let r = run_pingpong(&cfg).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows.iter().all(|row| row.mean_latency_s > 0.0));
        assert_eq!(r.details[2].staging_copies == 0, device_aware);
    }
}

#[test]
fn jacobi_uneven_grids_match_serial() {
    let reference = serial_reference([12, 8, 6], 4);
    for (grid, od, ranks, devices) in [([3, 2, 1], 1, 1, 1), ([1, 1, 3], 2, 3, 1), ([2, 2, 1], 3, 2, 2)] {
        let cfg = JacobiConfig {
            domain: [12, 8, 6],
            grid,
            od,
            ranks,
            devices,
            steps: 4,
            check: true,
            ..JacobiConfig::default()
        };
        let r = run_jacobi3d(&cfg).unwrap();
        assert_eq!(r.field, reference, "grid {grid:?} od {od}");
        assert_eq!(r.halo_mismatches, 0);
        assert_eq!(r.steps.len(), 4);
    }
}

#[test]
fn jacobi_rejects_bad_splits() {
    let cfg = JacobiConfig {
        domain: [10, 10, 10],
        grid: [3, 1, 1],
        ..JacobiConfig::default()
    };
    assert!(run_jacobi3d(&cfg).is_err());
}

#[test]
fn cli_runs_each_benchmark() {
    let exe = env!("CARGO_BIN_EXE_hrt-bench");
    let dir = std::env::temp_dir().join(format!("hrt-bench-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let report = dir.join("dgemm.json");
    let trace = dir.join("dgemm_trace.json");
    let out = std::process::Command::new(exe)
        .args(["--report", report.to_str().unwrap(), "--trace", trace.to_str().unwrap()])
        .args(["dgemm", "--n", "16", "--iters", "4", "--streams", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["verified"], true);
    assert!(std::fs::read_to_string(&trace).unwrap().contains("compute0"));

    let out = std::process::Command::new(exe)
        .args(["jacobi3d", "--domain", "8,8,8", "--grid", "2,1,1", "--od", "2", "--steps", "2", "--check"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("bitwise_equal=true"));

    let csv = dir.join("pp.csv");
    let out = std::process::Command::new(exe)
        .args(["--report", csv.to_str().unwrap(), "pingpong", "--sizes", "8..64", "--iters", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("size_bytes,iters,mean_latency_s,bandwidth_Bps\n"));
    assert_eq!(text.lines().count(), 5);

    let bad = std::process::Command::new(exe)
        .args(["--clock", "wall", "jacobi3d"])
        .output()
        .unwrap();
    assert!(!bad.status.success());
    let _ = std::fs::remove_dir_all(&dir);
}
