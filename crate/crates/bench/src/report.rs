//! CSV and JSON reporters.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PingPongRow {
    pub size_bytes: u64,
    pub iters: usize,
    pub mean_latency_s: f64,
    #[serde(rename = "bandwidth_Bps")]
    pub bandwidth_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub virtual_makespan_s: f64,
}

pub fn pingpong_csv(rows: &[PingPongRow]) -> String {
    let mut s = String::from("size_bytes,iters,mean_latency_s,bandwidth_Bps\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.9e},{:.6e}", r.size_bytes, r.iters, r.mean_latency_s, r.bandwidth_bps);
    }
    s
}

pub fn steps_csv(rows: &[StepRow]) -> String {
    let mut s = String::from("step,virtual_makespan_s\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.9e}", r.step, r.virtual_makespan_s);
    }
    s
}

/// Writes `value` as JSON when the path ends in `.json`, otherwise `csv`.
pub fn write_report<T: Serialize>(path: &Path, csv: &str, value: &T) -> io::Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
        std::fs::write(path, text)
    } else {
        std::fs::write(path, csv)
    }
}
