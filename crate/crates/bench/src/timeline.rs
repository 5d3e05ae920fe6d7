//! Per-device lanes built from a device trace.

use std::collections::BTreeMap;

use hrt_device::{DeviceId, Interval, IntervalKind, Lane, TraceEvent};
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct LaneTrack {
    pub lane: String,
    pub intervals: Vec<Interval>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeviceLanes {
    pub device: DeviceId,
    pub lanes: Vec<LaneTrack>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timeline {
    pub devices: Vec<DeviceLanes>,
}

fn lane_name(l: Lane) -> String {
    match l {
        Lane::Compute(i) => format!("compute{i}"),
        Lane::HostToDevice => "h2d".into(),
        Lane::DeviceToHost => "d2h".into(),
    }
}

fn lane_order(l: Lane) -> (u8, usize) {
    match l {
        Lane::Compute(i) => (0, i),
        Lane::HostToDevice => (1, 0),
        Lane::DeviceToHost => (2, 0),
    }
}

/// Groups the trace's intervals by device and lane, each lane sorted by
/// start time.
pub fn emit_timeline(events: &[TraceEvent]) -> Timeline {
    let mut by_dev: BTreeMap<DeviceId, BTreeMap<(u8, usize), (Lane, Vec<Interval>)>> = BTreeMap::new();
    for e in events {
        if let TraceEvent::Interval(iv) = e {
            by_dev
                .entry(iv.device)
                .or_default()
                .entry(lane_order(iv.lane))
                .or_insert_with(|| (iv.lane, Vec::new()))
                .1
                .push(iv.clone());
        }
    }
    let devices = by_dev
        .into_iter()
        .map(|(device, lanes)| DeviceLanes {
            device,
            lanes: lanes
                .into_values()
                .map(|(lane, mut intervals)| {
                    intervals.sort_by(|a, b| a.start.total_cmp(&b.start));
                    LaneTrack {
                        lane: lane_name(lane),
                        intervals,
                    }
                })
                .collect(),
        })
        .collect();
    Timeline { devices }
}

impl Timeline {
    fn of_kind(d: &DeviceLanes, kind: IntervalKind) -> impl Iterator<Item = &Interval> {
        d.lanes.iter().flat_map(|l| l.intervals.iter()).filter(move |i| i.kind == kind)
    }

    /// Pairs of (transfer, kernel) intervals on the same device that run at
    /// the same time.
    pub fn transfer_kernel_overlaps(&self) -> usize {
        let mut n = 0;
        for d in &self.devices {
            let kernels: Vec<&Interval> = Self::of_kind(d, IntervalKind::Kernel).filter(|k| k.end > k.start).collect();
            for t in Self::of_kind(d, IntervalKind::Transfer) {
                n += kernels.iter().filter(|k| k.overlaps(t)).count();
            }
        }
        n
    }

    /// No lane runs two intervals at once.
    pub fn lanes_are_serial(&self) -> bool {
        self.devices.iter().all(|d| {
            d.lanes
                .iter()
                .all(|l| l.intervals.windows(2).all(|w| w[0].end <= w[1].start))
        })
    }

    pub fn kernel_count(&self) -> usize {
        self.devices.iter().map(|d| Self::of_kind(d, IntervalKind::Kernel).count()).sum()
    }

    pub fn transfer_count(&self) -> usize {
        self.devices.iter().map(|d| Self::of_kind(d, IntervalKind::Transfer).count()).sum()
    }

    /// End time of every kernel, keyed by task id.
    pub fn kernel_ends(&self) -> BTreeMap<u64, f64> {
        let mut out = BTreeMap::new();
        for d in &self.devices {
            for k in Self::of_kind(d, IntervalKind::Kernel) {
                if let Some(t) = k.tag {
                    out.insert(t, k.end);
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("timeline serialises")
    }
}
