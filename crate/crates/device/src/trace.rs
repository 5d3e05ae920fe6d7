//! Structured trace of device intervals and runtime lifecycle events.

use std::io::{self, Write};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Compute(usize),
    HostToDevice,
    DeviceToHost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    Transfer,
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub device: DeviceId,
    pub lane: Lane,
    pub kind: IntervalKind,
    pub start: f64,
    pub end: f64,
    /// Task id for kernels, caller-chosen tag for transfers.
    pub tag: Option<u64>,
    pub bytes: u64,
}

impl Interval {
    /// Open-interval intersection; touching endpoints do not overlap.
    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Interval(Interval),
    Task {
        task_id: u64,
        state: String,
        device: Option<DeviceId>,
        virtual_time: f64,
    },
    Object {
        object_id: u64,
        action: String,
        virtual_time: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct TraceRecorder {
    events: Option<Arc<Mutex<Vec<TraceEvent>>>>,
}

impl TraceRecorder {
    pub fn enabled() -> Self {
        Self {
            events: Some(Arc::new(Mutex::new(Vec::new()))),
        }
    }

    pub fn disabled() -> Self {
        Self { events: None }
    }

    pub fn is_enabled(&self) -> bool {
        self.events.is_some()
    }

    pub fn record(&self, event: TraceEvent) {
        if let Some(ev) = &self.events {
            ev.lock().push(event);
        }
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events
            .as_ref()
            .map(|e| e.lock().clone())
            .unwrap_or_default()
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.events()
            .into_iter()
            .filter_map(|e| match e {
                TraceEvent::Interval(i) => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn clear(&self) {
        if let Some(ev) = &self.events {
            ev.lock().clear();
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in self.events() {
            serde_json::to_writer(&mut out, &e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(text: &str) -> serde_json::Result<Vec<TraceEvent>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect()
    }
}
