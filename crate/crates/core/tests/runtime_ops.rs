use std::sync::Arc;

use hrt_core::scheduler::{FifoScheduler, LeastLoadedScheduler, LocalityScheduler};
use hrt_core::{
    AccessMode, AccessTarget, CopyState, CoreError, KernelDefinition, KernelRef, ObjectHandle,
    Place, Runtime, RuntimeConfig, SchedulerKind, TaskState,
};
use hrt_device::{
    DeviceDescriptor, DeviceRegistry, DeviceType, HostBuffer, IntervalKind, TraceEvent,
    TraceRecorder, MIB,
};

const GPU: DeviceType = DeviceType::GpuSim;

/// Host device 0 and GPUs 1..=n on a virtual clock with tracing.
fn rig_with(gpus: u32, cap: u64, scheduler: SchedulerKind) -> Runtime {
    let reg = DeviceRegistry::builder().trace(TraceRecorder::enabled()).build();
    reg.register(DeviceDescriptor::host(0)).unwrap();
    for g in 1..=gpus {
        reg.register(DeviceDescriptor::gpu_sim(g, cap)).unwrap();
    }
    Runtime::with_config(
        Arc::new(reg),
        RuntimeConfig {
            scheduler,
            dedicated_threads: false,
        },
    )
}

fn rig(gpus: u32) -> Runtime {
    rig_with(gpus, 64 * MIB, SchedulerKind::Locality)
}

struct Kernels {
    fill: KernelRef,
    inc: KernelRef,
    copy: KernelRef,
}

/// fill: write-only, every u32 := groups[0]. inc: read-write +1. copy: arg1 := arg0.
fn kernels(rt: &Runtime) -> Kernels {
    let fill = rt
        .register_kernel(
            KernelDefinition::new("fill")
                .everywhere(|inv| {
                    let v = inv.geometry.groups[0];
                    inv.args[0].as_mut_slice::<u32>().fill(v);
                    Ok(())
                })
                .fixed_cost(1e-3),
        )
        .unwrap();
    let inc = rt
        .register_kernel(
            KernelDefinition::new("inc")
                .everywhere(|inv| {
                    for x in inv.args[0].as_mut_slice::<u32>() {
                        *x += 1;
                    }
                    Ok(())
                })
                .fixed_cost(1e-3),
        )
        .unwrap();
    let copy = rt
        .register_kernel(
            KernelDefinition::new("copy")
                .everywhere(|inv| {
                    let src = inv.args[0].bytes().to_vec();
                    inv.args[1].bytes_mut().copy_from_slice(&src);
                    Ok(())
                })
                .fixed_cost(1e-3),
        )
        .unwrap();
    Kernels { fill, inc, copy }
}

fn fill_on(rt: &Runtime, k: &Kernels, h: &ObjectHandle, value: u32, ty: DeviceType) -> hrt_core::TaskHandle {
    rt.task()
        .writes(h)
        .set_threads([value, 1, 1], [1, 1, 1])
        .device(ty)
        .submit(k.fill)
        .unwrap()
}

fn host_read(rt: &Runtime, h: &ObjectHandle) -> Vec<u32> {
    let v = rt.request_data(h, true, false).unwrap().wait().unwrap().to_vec::<u32>();
    rt.release(h).unwrap();
    v
}

fn kernel_intervals(rt: &Runtime) -> Vec<hrt_device::Interval> {
    rt.registry()
        .trace()
        .intervals()
        .into_iter()
        .filter(|i| i.kind == IntervalKind::Kernel)
        .collect()
}

#[test]
fn create_object_sizes() {
    let rt = rig(1);
    let m = rt.create::<f64>(&[1024, 1024]).unwrap();
    assert_eq!(m.size_bytes(), 8 * MIB);
    let b = rt.create_object(&[1], 1).unwrap();
    assert_eq!(b.size_bytes(), 1);
    assert_eq!(rt.create_object(&[0], 1).unwrap_err(), CoreError::InvalidShape);
    let s = rt.copy_states(&m).unwrap();
    assert_eq!(s.host, CopyState::Absent);
    assert!(s.devices.is_empty(), "no memory before first use");
}

#[test]
fn read_request_stages_and_keeps_device_copy() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[16]).unwrap();
    fill_on(&rt, &k, &a, 7, GPU).wait().unwrap();
    assert_eq!(rt.copy_states(&a).unwrap().valid_places(), vec![Place::Device(1)]);
    let d2h = rt.stats().device_to_host;
    assert_eq!(host_read(&rt, &a), vec![7; 16]);
    assert_eq!(rt.stats().device_to_host, d2h + 1);
    let s = rt.copy_states(&a).unwrap();
    assert_eq!(s.host, CopyState::Valid);
    assert_eq!(s.get(Place::Device(1)), CopyState::Valid);
}

#[test]
fn write_request_invalidates_devices_at_grant() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    fill_on(&rt, &k, &a, 1, GPU).wait().unwrap();
    let view = rt.request_data(&a, false, true).unwrap().wait().unwrap();
    assert_eq!(rt.copy_states(&a).unwrap().get(Place::Device(1)), CopyState::Stale);
    view.copy_from(&[9u32, 9, 9, 9]);
    assert!(matches!(
        rt.request_data(&a, true, false),
        Err(CoreError::LeaseConflict(_))
    ));
    rt.release(&a).unwrap();
    assert_eq!(rt.copy_states(&a).unwrap().valid_places(), vec![Place::Host]);
    rt.task().reads_writes(&a).device(GPU).submit(k.inc).unwrap().wait().unwrap();
    assert_eq!(host_read(&rt, &a), vec![10; 4]);
}

#[test]
fn release_rules() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    fill_on(&rt, &k, &a, 3, GPU).wait().unwrap();
    rt.request_data(&a, true, false).unwrap().wait().unwrap();
    let before = rt.copy_states(&a).unwrap();
    rt.release(&a).unwrap();
    assert_eq!(rt.copy_states(&a).unwrap(), before);
    assert_eq!(rt.release(&a).unwrap_err(), CoreError::NoLease(a.id()));
    assert_eq!(
        rt.request_data(&a, false, false).err(),
        Some(CoreError::InvalidAccess)
    );
}

#[test]
fn shared_read_leases_stack() {
    let rt = rig(1);
    let a = rt.create::<u32>(&[4]).unwrap();
    let f1 = rt.request_data(&a, true, false).unwrap();
    let f2 = rt.request_data(&a, true, false).unwrap();
    assert_eq!(f1.wait().unwrap().to_vec::<u32>(), vec![0; 4]);
    f2.wait().unwrap();
    assert!(rt.request_data(&a, true, true).is_err());
    rt.release(&a).unwrap();
    rt.release(&a).unwrap();
    assert!(rt.release(&a).is_err());
}

#[test]
fn writing_task_waits_for_lease_release() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    rt.request_data(&a, true, false).unwrap().wait().unwrap();
    let t = rt.task().reads_writes(&a).device(GPU).submit(k.inc).unwrap();
    for _ in 0..20 {
        rt.progress();
    }
    assert!(matches!(t.state(), TaskState::Blocked));
    rt.release(&a).unwrap();
    t.wait().unwrap();
    assert_eq!(host_read(&rt, &a), vec![1; 4]);
}

#[test]
fn copy_to_region_matches_request_data() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[8]).unwrap();
    fill_on(&rt, &k, &a, 5, GPU).wait().unwrap();
    let region = HostBuffer::unpinned(64);
    let before = rt.copy_states(&a).unwrap();
    rt.copy_to_region(&a, &region, 16).unwrap().wait().unwrap();
    assert_eq!(rt.copy_states(&a).unwrap(), before);
    let oracle: Vec<u8> = bytemuck::cast_slice(&host_read(&rt, &a)).to_vec();
    assert_eq!(&region.to_vec()[16..48], &oracle[..]);

    let region2 = HostBuffer::unpinned(32);
    rt.copy_to_region(&a, &region2, 0).unwrap().wait().unwrap();
    assert_eq!(region2.to_vec(), oracle);

    let short = HostBuffer::unpinned(31);
    assert!(matches!(
        rt.copy_to_region(&a, &short, 0),
        Err(CoreError::RegionTooSmall { needed: 32, available: 31 })
    ));
}

#[test]
fn raw_orders_and_rar_overlaps() {
    let rt = rig_with(1, 64 * MIB, SchedulerKind::Locality);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    let b = rt.create::<u32>(&[4]).unwrap();
    let c = rt.create::<u32>(&[4]).unwrap();
    let t1 = fill_on(&rt, &k, &a, 2, GPU);
    let t2 = rt.task().reads(&a).writes(&b).device(GPU).submit(k.copy).unwrap();
    let t3 = rt.task().reads(&a).writes(&c).device(GPU).submit(k.copy).unwrap();
    rt.wait_all().unwrap();
    let iv = kernel_intervals(&rt);
    let find = |id| iv.iter().find(|i| i.tag == Some(id)).unwrap().clone();
    let (i1, i2, i3) = (find(t1.id()), find(t2.id()), find(t3.id()));
    assert!(i2.start >= i1.end && i3.start >= i1.end);
    assert!(i2.overlaps(&i3), "two readers run concurrently");
    assert_eq!(host_read(&rt, &c), vec![2; 4]);
}

#[test]
fn explicit_dependencies() {
    let rt = rig(1);
    let k = kernels(&rt);
    let objs: Vec<_> = (0..4).map(|_| rt.create::<u32>(&[4]).unwrap()).collect();
    // Diamond A -> {B, C} -> D, built out of submission order.
    let mut ta = rt.task().writes(&objs[0]).device(GPU).build(k.fill).unwrap();
    let mut tb = rt.task().writes(&objs[1]).device(GPU).build(k.fill).unwrap();
    let mut tc = rt.task().writes(&objs[2]).device(GPU).build(k.fill).unwrap();
    let mut td = rt.task().writes(&objs[3]).device(GPU).build(k.fill).unwrap();
    rt.add_dependency(&mut tb, ta.id()).unwrap();
    rt.add_dependency(&mut tc, ta.id()).unwrap();
    rt.add_dependency(&mut td, tb.id()).unwrap();
    rt.add_dependency(&mut td, tc.id()).unwrap();
    let self_id = ta.id();
    assert_eq!(
        rt.add_dependency(&mut ta, self_id).unwrap_err(),
        CoreError::SelfDependency(self_id)
    );
    let ids = [ta.id(), tb.id(), tc.id(), td.id()];
    let hd = rt.submit(td).unwrap();
    let hc = rt.submit(tc).unwrap();
    let hb = rt.submit(tb).unwrap();
    for _ in 0..10 {
        rt.progress();
    }
    assert_eq!(hd.state(), TaskState::Blocked);
    let ha = rt.submit(ta).unwrap();
    hd.wait().unwrap();
    for h in [&ha, &hb, &hc] {
        assert_eq!(h.state(), TaskState::Complete);
    }
    let iv = kernel_intervals(&rt);
    let at = |id| iv.iter().find(|i| i.tag == Some(id)).unwrap().clone();
    assert!(at(ids[1]).start >= at(ids[0]).end);
    assert!(at(ids[2]).start >= at(ids[0]).end);
    assert!(at(ids[3]).start >= at(ids[1]).end.max(at(ids[2]).end));
}

#[test]
fn explicit_chain_runs_in_order() {
    let rt = rig(2);
    let k = kernels(&rt);
    let objs: Vec<_> = (0..3).map(|_| rt.create::<u32>(&[4]).unwrap()).collect();
    let mut prev = None;
    let mut ids = Vec::new();
    for o in &objs {
        let mut t = rt.task().writes(o).device(GPU).build(k.fill).unwrap();
        if let Some(p) = prev {
            rt.add_dependency(&mut t, p).unwrap();
        }
        prev = Some(t.id());
        ids.push(t.id());
        rt.submit(t).unwrap();
    }
    rt.wait_all().unwrap();
    let iv = kernel_intervals(&rt);
    let at = |id| iv.iter().find(|i| i.tag == Some(id)).unwrap().clone();
    assert!(at(ids[1]).start >= at(ids[0]).end);
    assert!(at(ids[2]).start >= at(ids[1]).end);
}

#[test]
fn explicit_cycle_is_rejected() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    let b = rt.create::<u32>(&[4]).unwrap();
    let mut ta = rt.task().writes(&a).device(GPU).build(k.fill).unwrap();
    let mut tb = rt.task().writes(&b).device(GPU).build(k.fill).unwrap();
    let (ia, ib) = (ta.id(), tb.id());
    rt.add_dependency(&mut ta, ib).unwrap();
    rt.add_dependency(&mut tb, ia).unwrap();
    assert_eq!(rt.submit(ta).unwrap_err(), CoreError::Cycle(ia));
    // With the rejected task gone the edge into it is harmless but unmet.
    assert!(rt.submit(tb).is_ok());
}

#[test]
fn progress_steps() {
    let rt = rig(1);
    assert_eq!(rt.progress(), 0);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    rt.request_data(&a, false, true).unwrap().wait().unwrap().copy_from(&[1u32; 4]);
    rt.release(&a).unwrap();
    let t = rt.task().reads_writes(&a).device(GPU).submit(k.inc).unwrap();
    rt.progress();
    // The host -> device copy is in flight; the kernel cannot be enqueued yet.
    assert_eq!(t.state(), TaskState::Issued);
    assert_eq!(rt.registry().device(1).unwrap().stats().h2d_transfers, 1);
    assert_eq!(rt.registry().device(1).unwrap().stats().kernels, 0);
    rt.registry().clock().advance();
    rt.progress();
    assert_eq!(t.state(), TaskState::Running);
    assert_eq!(rt.registry().device(1).unwrap().stats().kernels, 1);
    t.wait().unwrap();
    assert_eq!(host_read(&rt, &a), vec![2; 4]);
}

#[test]
fn independent_tasks_spread_over_devices() {
    let rt = rig(2);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    let b = rt.create::<u32>(&[4]).unwrap();
    fill_on(&rt, &k, &a, 1, GPU);
    fill_on(&rt, &k, &b, 1, GPU);
    rt.progress();
    let events = rt.registry().trace().events();
    let issued: Vec<_> = events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Task { state, device, .. } if state == "issued" => *device,
            _ => None,
        })
        .collect();
    assert_eq!(issued, vec![1, 2]);
}

#[test]
fn wait_semantics() {
    let rt = rig(1);
    let k = kernels(&rt);
    let boom = rt
        .register_kernel(KernelDefinition::new("boom").gpu(|_| Err("bad input".into())).fixed_cost(1e-3))
        .unwrap();
    let a = rt.create::<u32>(&[4]).unwrap();
    let t = fill_on(&rt, &k, &a, 1, GPU);
    t.wait().unwrap();
    let now = rt.now();
    t.wait().unwrap();
    assert_eq!(rt.now(), now, "waiting on a complete task is immediate");

    let bad = rt.task().reads_writes(&a).device(GPU).submit(boom).unwrap();
    let after = rt.task().reads_writes(&a).device(GPU).submit(k.inc).unwrap();
    match bad.wait() {
        Err(CoreError::TaskFailed(msg)) => assert!(msg.contains("bad input")),
        other => panic!("expected failure, got {other:?}"),
    }
    assert!(after.wait().is_err(), "dependents of a failed task fail");
    assert_eq!(bad.state(), TaskState::Failed);
}

#[test]
fn lru_eviction_order() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[64]).unwrap();
    let b = rt.create::<u32>(&[64]).unwrap();
    fill_on(&rt, &k, &a, 1, GPU).wait().unwrap();
    for _ in 0..4 {
        rt.task().reads_writes(&b).device(GPU).submit(k.inc).unwrap().wait().unwrap();
    }
    let freed = rt.evict_lru(1, a.size_bytes()).unwrap();
    assert!(freed >= a.size_bytes());
    assert_eq!(rt.copy_states(&a).unwrap().get(Place::Device(1)), CopyState::Absent);
    assert_eq!(rt.copy_states(&b).unwrap().get(Place::Device(1)), CopyState::Valid);
    // Sole VALID copy was written back first.
    rt.progress();
    assert_eq!(host_read(&rt, &a), vec![1; 64]);
    assert_eq!(host_read(&rt, &b), vec![4; 64]);
}

#[test]
fn eviction_unsatisfiable_when_everything_is_busy() {
    let rt = rig(1);
    let a = rt.create::<u32>(&[64]).unwrap();
    let g = rt.acquire(&a, AccessMode::Read, AccessTarget::Device(1)).unwrap();
    g.wait().unwrap();
    assert!(matches!(
        rt.evict_lru(1, 1),
        Err(CoreError::Unsatisfiable { device: 1, .. })
    ));
    g.release(false).unwrap();
    assert!(rt.evict_lru(1, 1).is_ok());
}

#[test]
fn memory_pressure_evicts_during_issue() {
    // Room for two 256-byte objects per device.
    let rt = rig_with(1, 512, SchedulerKind::Locality);
    let k = kernels(&rt);
    let objs: Vec<_> = (0..6).map(|_| rt.create::<u32>(&[64]).unwrap()).collect();
    for (i, o) in objs.iter().enumerate() {
        fill_on(&rt, &k, o, i as u32 + 1, GPU);
    }
    for o in &objs {
        rt.task().reads_writes(o).device(GPU).submit(k.inc).unwrap();
    }
    rt.wait_all().unwrap();
    assert!(rt.stats().evictions > 0);
    for (i, o) in objs.iter().enumerate() {
        assert_eq!(host_read(&rt, o), vec![i as u32 + 2; 64]);
    }
}

#[test]
fn oversized_object_fails_task() {
    let rt = rig_with(1, 512, SchedulerKind::Locality);
    let k = kernels(&rt);
    let big = rt.create::<u32>(&[1024]).unwrap();
    let t = fill_on(&rt, &k, &big, 1, GPU);
    assert!(matches!(t.wait(), Err(CoreError::TaskFailed(_))));
}

#[test]
fn fifo_completes_in_submission_order_on_one_device() {
    let rt = rig(1);
    rt.set_scheduler(Box::new(FifoScheduler::default())).unwrap();
    assert_eq!(rt.scheduler_name(), "fifo");
    let k = kernels(&rt);
    let objs: Vec<_> = (0..8).map(|_| rt.create::<u32>(&[4]).unwrap()).collect();
    let ids: Vec<_> = objs.iter().map(|o| fill_on(&rt, &k, o, 1, GPU).id()).collect();
    rt.wait_all().unwrap();
    let mut iv = kernel_intervals(&rt);
    iv.sort_by(|a, b| a.end.partial_cmp(&b.end).unwrap().then(a.tag.cmp(&b.tag)));
    assert_eq!(iv.iter().map(|i| i.tag.unwrap()).collect::<Vec<_>>(), ids);
}

#[test]
fn locality_follows_valid_bytes() {
    let rt = rig(2);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[256]).unwrap();
    rt.prefetch(&a, 2, None).unwrap().wait().unwrap();
    assert_eq!(rt.copy_states(&a).unwrap().get(Place::Device(2)), CopyState::Valid);
    let t = rt.task().reads_writes(&a).device(GPU).submit(k.inc).unwrap();
    t.wait().unwrap();
    let iv = kernel_intervals(&rt);
    assert_eq!(iv.iter().find(|i| i.tag == Some(t.id())).unwrap().device, 2);
}

#[test]
fn least_loaded_balances() {
    let rt = rig(2);
    rt.set_scheduler(Box::new(LeastLoadedScheduler::default())).unwrap();
    let k = kernels(&rt);
    let objs: Vec<_> = (0..4).map(|_| rt.create::<u32>(&[4]).unwrap()).collect();
    for o in &objs {
        fill_on(&rt, &k, o, 1, GPU);
    }
    rt.wait_all().unwrap();
    let iv = kernel_intervals(&rt);
    assert_eq!(iv.iter().filter(|i| i.device == 1).count(), 2);
    assert_eq!(iv.iter().filter(|i| i.device == 2).count(), 2);
}

#[test]
fn scheduler_swap_requires_idle_runtime() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    let t = fill_on(&rt, &k, &a, 1, GPU);
    assert_eq!(
        rt.set_scheduler(Box::new(LocalityScheduler::default())).unwrap_err(),
        CoreError::InFlight
    );
    t.wait().unwrap();
    rt.set_scheduler(Box::new(LocalityScheduler::default())).unwrap();
}

#[test]
fn destroy_semantics() {
    let rt = rig(1);
    let k = kernels(&rt);
    let idle = rt.create::<u32>(&[64]).unwrap();
    fill_on(&rt, &k, &idle, 1, GPU).wait().unwrap();
    let live = rt.registry().device(1).unwrap().stats().live_bytes;
    rt.destroy_object(&idle).unwrap();
    rt.destroy_object(&idle).unwrap();
    rt.progress();
    assert!(!rt.object_exists(idle.id()));
    assert!(rt.registry().device(1).unwrap().stats().live_bytes < live);
    assert!(matches!(
        rt.task().writes(&idle).device(GPU).submit(k.fill),
        Err(CoreError::ObjectDestroyed(_)) | Err(CoreError::UnknownObject(_))
    ));

    let busy = rt.create::<u32>(&[64]).unwrap();
    let t = fill_on(&rt, &k, &busy, 1, GPU);
    rt.destroy_object(&busy).unwrap();
    rt.progress();
    assert!(rt.object_exists(busy.id()), "pending task keeps the object alive");
    t.wait().unwrap();
    rt.progress();
    assert!(!rt.object_exists(busy.id()));
    let destroyed: Vec<_> = rt
        .registry()
        .trace()
        .events()
        .into_iter()
        .filter(|e| matches!(e, TraceEvent::Object { action, .. } if action == "destroyed"))
        .collect();
    assert_eq!(destroyed.len(), 2);
}

#[test]
fn dropping_last_handle_destroys() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    let id = a.id();
    let t = fill_on(&rt, &k, &a, 1, GPU);
    drop(a);
    t.wait().unwrap();
    rt.progress();
    assert!(!rt.object_exists(id));
}

#[test]
fn kernel_registry_rules() {
    let rt = rig(1);
    rt.register_kernel(KernelDefinition::new("k").host(|_| Ok(())).gpu(|_| Ok(()))).unwrap();
    assert_eq!(
        rt.register_kernel(KernelDefinition::new("k").host(|_| Ok(()))).unwrap_err(),
        CoreError::DuplicateKernel("k".into())
    );
    assert_eq!(
        rt.register_kernel(KernelDefinition::new("none")).unwrap_err(),
        CoreError::EmptyKernel("none".into())
    );
    let host_only = rt.register_kernel(KernelDefinition::new("h").host(|_| Ok(()))).unwrap();
    let a = rt.create::<u32>(&[4]).unwrap();
    assert!(matches!(
        rt.task().writes(&a).device(GPU).submit(host_only),
        Err(CoreError::KernelUnavailable { .. })
    ));
    assert_eq!(
        rt.task().writes(&a).submit(host_only).unwrap_err(),
        CoreError::MissingDeviceType
    );
    assert!(matches!(
        rt.task().writes(&a).reads(&a).device(DeviceType::Host).submit(host_only),
        Err(CoreError::DuplicateArgument(_))
    ));
}

fn dgemm_def() -> KernelDefinition {
    KernelDefinition::new("dgemm").everywhere(|inv| {
        let n = (inv.args[0].bytes().len() / 8).isqrt();
        let a = inv.args[0].as_slice::<f64>().to_vec();
        let b = inv.args[1].as_slice::<f64>().to_vec();
        let c = inv.args[2].as_mut_slice::<f64>();
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[i * n + k] * b[k * n + j];
                }
                c[i * n + j] = s;
            }
        }
        Ok(())
    })
}

fn run_dgemm(ty: DeviceType, n: usize) -> Vec<f64> {
    let rt = rig(1);
    let dgemm = rt.register_kernel(dgemm_def()).unwrap();
    let a = rt.create::<f64>(&[n as u64, n as u64]).unwrap();
    let b = rt.create::<f64>(&[n as u64, n as u64]).unwrap();
    let c = rt.create::<f64>(&[n as u64, n as u64]).unwrap();
    let av: Vec<f64> = (0..n * n).map(|i| (i % 7) as f64 - 3.0).collect();
    let bv: Vec<f64> = (0..n * n).map(|i| (i % 5) as f64 * 0.5).collect();
    rt.request_data(&a, false, true).unwrap().wait().unwrap().copy_from(&av);
    rt.release(&a).unwrap();
    rt.request_data(&b, false, true).unwrap().wait().unwrap().copy_from(&bv);
    rt.release(&b).unwrap();
    let mut task = rt.task();
    task.arg(&a).read();
    task.arg(&b).read();
    task.arg(&c).write().dim_x();
    task.set_threads([32, 32, 1], [32, 32, 1]);
    task.device(ty);
    task.submit(dgemm).unwrap().wait().unwrap();
    let out = rt.request_data(&c, true, false).unwrap().wait().unwrap().to_vec::<f64>();
    rt.release(&c).unwrap();
    let mut oracle = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            oracle[i * n + j] = (0..n).map(|k| av[i * n + k] * bv[k * n + j]).sum();
        }
    }
    assert_eq!(out, oracle);
    out
}

#[test]
fn dgemm_matches_oracle_and_device_choice_does_not_matter() {
    assert_eq!(run_dgemm(GPU, 48), run_dgemm(DeviceType::Host, 48));
}

#[test]
fn write_only_zeroing_kernel() {
    let rt = rig(1);
    let zero = rt
        .register_kernel(KernelDefinition::new("zero").everywhere(|inv| {
            inv.args[0].bytes_mut().fill(0);
            Ok(())
        }))
        .unwrap();
    let c = rt.create::<u32>(&[16]).unwrap();
    rt.request_data(&c, false, true).unwrap().wait().unwrap().copy_from(&[5u32; 16]);
    rt.release(&c).unwrap();
    rt.task().writes(&c).device(GPU).submit(zero).unwrap().wait().unwrap();
    assert_eq!(host_read(&rt, &c), vec![0; 16]);
}

#[test]
fn scratch_is_zeroed_and_sized() {
    let rt = rig(1);
    let probe = rt
        .register_kernel(KernelDefinition::new("probe").gpu(|inv| {
            let ok = inv.scratch.len() == 100 && inv.scratch.iter().all(|&b| b == 0);
            inv.scratch.fill(1);
            inv.args[0].as_mut_slice::<u32>()[0] = ok as u32;
            Ok(())
        }))
        .unwrap();
    let a = rt.create::<u32>(&[1]).unwrap();
    for _ in 0..2 {
        rt.task().writes(&a).scratch(100).device(GPU).submit(probe).unwrap().wait().unwrap();
        assert_eq!(host_read(&rt, &a), vec![1]);
    }
}

#[test]
fn device_to_device_goes_through_host() {
    let rt = rig(2);
    rt.set_scheduler(Box::new(FifoScheduler::default())).unwrap();
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[8]).unwrap();
    fill_on(&rt, &k, &a, 4, GPU).wait().unwrap();
    let g = rt.acquire(&a, AccessMode::Read, AccessTarget::Device(2)).unwrap();
    g.wait().unwrap();
    g.release(false).unwrap();
    let s = rt.copy_states(&a).unwrap();
    assert_eq!(s.valid_places(), vec![Place::Host, Place::Device(1), Place::Device(2)]);
    let d2 = rt.registry().device(2).unwrap().stats();
    assert_eq!((d2.h2d_transfers, d2.d2h_transfers), (1, 0));
}

#[test]
fn access_grant_write_then_release_makes_sole_valid() {
    let rt = rig(1);
    let a = rt.create::<u32>(&[4]).unwrap();
    let g = rt.acquire(&a, AccessMode::Write, AccessTarget::AnyDevice).unwrap();
    let loc = g.wait().unwrap();
    let alloc = match loc {
        hrt_device::Location::Device { alloc, .. } => alloc,
        other => panic!("expected device location, got {other:?}"),
    };
    rt.registry()
        .device(1)
        .unwrap()
        .write_direct(&alloc, 0, bytemuck::cast_slice(&[3u32; 4]))
        .unwrap();
    g.release(true).unwrap();
    assert_eq!(rt.copy_states(&a).unwrap().valid_places(), vec![Place::Device(1)]);
    assert_eq!(host_read(&rt, &a), vec![3; 4]);
}

#[test]
fn builder_setters_commute() {
    let order_a = {
        let rt = rig(1);
        let k = kernels(&rt);
        let a = rt.create::<u32>(&[4]).unwrap();
        let t = rt
            .task()
            .writes(&a)
            .scratch(8)
            .set_threads([6, 1, 1], [1, 1, 1])
            .device(GPU)
            .submit(k.fill)
            .unwrap();
        t.wait().unwrap();
        host_read(&rt, &a)
    };
    let order_b = {
        let rt = rig(1);
        let k = kernels(&rt);
        let a = rt.create::<u32>(&[4]).unwrap();
        let t = rt
            .task()
            .device(GPU)
            .set_threads([6, 1, 1], [1, 1, 1])
            .writes(&a)
            .scratch(8)
            .submit(k.fill)
            .unwrap();
        t.wait().unwrap();
        host_read(&rt, &a)
    };
    assert_eq!(order_a, order_b);
    assert_eq!(order_a, vec![6; 4]);
}

#[test]
fn trace_lifecycle_is_forward_only() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    let t = fill_on(&rt, &k, &a, 1, GPU);
    t.wait().unwrap();
    let order = ["submitted", "blocked", "runnable", "issued", "running", "complete"];
    let states: Vec<usize> = rt
        .registry()
        .trace()
        .events()
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Task { task_id, state, .. } if *task_id == t.id() => {
                order.iter().position(|s| s == state)
            }
            _ => None,
        })
        .collect();
    assert!(states.windows(2).all(|w| w[0] < w[1]), "{states:?}");
    assert_eq!(states.last(), Some(&5));
    let mut buf = Vec::new();
    rt.registry().trace().write_jsonl(&mut buf).unwrap();
    let back = TraceRecorder::read_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap();
    assert_eq!(back, rt.registry().trace().events());
}

#[test]
fn stalled_wait_reports_error() {
    let rt = rig(1);
    let k = kernels(&rt);
    let a = rt.create::<u32>(&[4]).unwrap();
    let mut t = rt.task().writes(&a).device(GPU).build(k.fill).unwrap();
    rt.add_dependency(&mut t, 999_999).unwrap();
    let h = rt.submit(t).unwrap();
    assert!(matches!(h.wait(), Err(CoreError::Stalled(_))));
}

#[test]
fn wall_clock_with_dedicated_threads() {
    let reg = DeviceRegistry::builder()
        .clock_mode(hrt_device::ClockMode::Wall)
        .build();
    reg.register(DeviceDescriptor::gpu_sim(1, 16 * MIB)).unwrap();
    reg.register(DeviceDescriptor::gpu_sim(2, 16 * MIB)).unwrap();
    let rt = Runtime::with_config(
        Arc::new(reg),
        RuntimeConfig {
            scheduler: SchedulerKind::Locality,
            dedicated_threads: true,
        },
    );
    let k = kernels(&rt);
    let objs: Vec<_> = (0..8).map(|_| rt.create::<u32>(&[1024]).unwrap()).collect();
    for (i, o) in objs.iter().enumerate() {
        fill_on(&rt, &k, o, i as u32 + 1, GPU);
        rt.task().reads_writes(o).device(GPU).submit(k.inc).unwrap();
    }
    rt.wait_all().unwrap();
    for (i, o) in objs.iter().enumerate() {
        assert_eq!(host_read(&rt, o), vec![i as u32 + 2; 1024]);
    }
}

#[test]
fn handles_are_send_and_sync() {
    fn check<T: Send + Sync>() {}
    check::<Runtime>();
    check::<ObjectHandle>();
    check::<hrt_core::TaskHandle>();
}
