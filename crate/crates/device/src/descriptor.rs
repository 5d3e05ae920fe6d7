use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{DeviceError, Result};

pub type DeviceId = u32;

pub const DEFAULT_COMPUTE_STREAMS: usize = 5;
pub const TRANSFER_STREAMS: usize = 2;
pub const MIB: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceType {
    Host,
    GpuSim,
}

impl DeviceType {
    pub fn wire_code(self) -> u8 {
        match self {
            DeviceType::Host => 0,
            DeviceType::GpuSim => 1,
        }
    }

    pub fn from_wire_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DeviceType::Host),
            1 => Some(DeviceType::GpuSim),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Wall,
    #[default]
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDescriptor {
    pub device_id: DeviceId,
    pub device_type: DeviceType,
    pub memory_capacity: u64,
    pub compute_stream_count: usize,
    pub transfer_stream_count: usize,
    /// Seconds of fixed cost per host<->device transfer.
    pub transfer_latency: f64,
    /// Bytes per second for host<->device transfers.
    pub transfer_bandwidth: f64,
}

impl DeviceDescriptor {
    pub fn host(device_id: DeviceId) -> Self {
        Self {
            device_id,
            device_type: DeviceType::Host,
            memory_capacity: 1 << 30,
            compute_stream_count: compute_streams_from_env(),
            transfer_stream_count: TRANSFER_STREAMS,
            transfer_latency: 0.0,
            transfer_bandwidth: f64::INFINITY,
        }
    }

    pub fn gpu_sim(device_id: DeviceId, memory_capacity: u64) -> Self {
        Self {
            device_id,
            device_type: DeviceType::GpuSim,
            memory_capacity,
            compute_stream_count: compute_streams_from_env(),
            transfer_stream_count: TRANSFER_STREAMS,
            transfer_latency: 10e-6,
            transfer_bandwidth: 10e9,
        }
    }

    pub fn with_streams(mut self, compute_streams: usize) -> Self {
        self.compute_stream_count = compute_streams;
        self
    }

    pub fn with_link(mut self, latency: f64, bandwidth: f64) -> Self {
        self.transfer_latency = latency;
        self.transfer_bandwidth = bandwidth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.memory_capacity == 0 {
            return Err(DeviceError::ZeroCapacity(self.device_id));
        }
        let invalid = |reason: &str| DeviceError::InvalidDescriptor {
            id: self.device_id,
            reason: reason.to_string(),
        };
        if self.compute_stream_count == 0 {
            return Err(invalid("compute_stream_count must be at least 1"));
        }
        if self.transfer_stream_count != TRANSFER_STREAMS {
            return Err(invalid("transfer_stream_count must be 2"));
        }
        if !(self.transfer_latency >= 0.0) || !(self.transfer_bandwidth > 0.0) {
            return Err(invalid("link latency must be >= 0 and bandwidth > 0"));
        }
        Ok(())
    }

    /// Virtual duration of a transfer of `bytes` over this device's link.
    pub fn transfer_time(&self, bytes: u64) -> f64 {
        if bytes == 0 {
            return 0.0;
        }
        self.transfer_latency + bytes as f64 / self.transfer_bandwidth
    }
}

/// Compute streams per device: `HRT_STREAMS` when set, otherwise 5.
pub fn compute_streams_from_env() -> usize {
    std::env::var("HRT_STREAMS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(DEFAULT_COMPUTE_STREAMS)
}

/// Pinned staging pool size: `HRT_PINNED_POOL_MB` when set, otherwise 64 MiB.
pub fn pinned_pool_bytes_from_env() -> u64 {
    std::env::var("HRT_PINNED_POOL_MB")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map(|mb| mb * MIB)
        .unwrap_or(64 * MIB)
}

/// One entry of a device registry config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfigEntry {
    #[serde(rename = "type")]
    pub device_type: DeviceType,
    pub capacity_mb: u64,
    #[serde(default)]
    pub latency_us: f64,
    #[serde(default = "default_bandwidth_gbps")]
    pub bandwidth_gbps: f64,
    #[serde(default)]
    pub clock: ClockMode,
    #[serde(default)]
    pub streams: Option<usize>,
}

fn default_bandwidth_gbps() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RegistryConfig {
    #[serde(default)]
    pub devices: Vec<DeviceConfigEntry>,
    /// Optional cap modelling one host bus shared by all devices (bytes/s).
    #[serde(default)]
    pub shared_bus_gbps: Option<f64>,
}

impl RegistryConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| DeviceError::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| DeviceError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DeviceError::Config(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json_str(&text),
            _ => Self::from_toml_str(&text),
        }
    }

    /// Descriptors in file order; device ids are assigned sequentially from 0.
    pub fn descriptors(&self) -> Vec<DeviceDescriptor> {
        self.devices
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let id = i as DeviceId;
                let base = match e.device_type {
                    DeviceType::Host => DeviceDescriptor::host(id),
                    DeviceType::GpuSim => DeviceDescriptor::gpu_sim(id, 0),
                };
                let mut d = DeviceDescriptor {
                    memory_capacity: e.capacity_mb * MIB,
                    ..base
                };
                if e.device_type == DeviceType::GpuSim {
                    d.transfer_latency = e.latency_us * 1e-6;
                    d.transfer_bandwidth = e.bandwidth_gbps * 1e9;
                }
                if let Some(s) = e.streams {
                    d.compute_stream_count = s;
                }
                d
            })
            .collect()
    }

    pub fn clock_mode(&self) -> ClockMode {
        if self.devices.iter().any(|d| d.clock == ClockMode::Wall) {
            ClockMode::Wall
        } else {
            ClockMode::Virtual
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_toml_registry() {
        let cfg = RegistryConfig::from_toml_str(
            r#"
            [[devices]]
            type = "host"
            capacity_mb = 512

            [[devices]]
            type = "gpu_sim"
            capacity_mb = 256
            latency_us = 10.0
            bandwidth_gbps = 1.0
            clock = "virtual"
            "#,
        )
        .unwrap();
        let d = cfg.descriptors();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].device_id, 1);
        assert_eq!(d[1].memory_capacity, 256 * MIB);
        assert!((d[1].transfer_latency - 1e-5).abs() < 1e-15);
        assert_eq!(d[1].transfer_bandwidth, 1e9);
        assert_eq!(cfg.clock_mode(), ClockMode::Virtual);
    }

    #[test]
    fn parses_json_registry() {
        let cfg = RegistryConfig::from_json_str(
            r#"{"devices":[{"type":"gpu_sim","capacity_mb":4,"latency_us":1,"bandwidth_gbps":2,"clock":"wall"}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.clock_mode(), ClockMode::Wall);
        assert_eq!(cfg.descriptors()[0].transfer_bandwidth, 2e9);
    }

    #[test]
    fn descriptor_validation() {
        let mut d = DeviceDescriptor::gpu_sim(3, 0);
        assert_eq!(d.validate(), Err(DeviceError::ZeroCapacity(3)));
        d.memory_capacity = 10;
        d.compute_stream_count = 0;
        assert!(d.validate().is_err());
        d.compute_stream_count = 5;
        d.transfer_stream_count = 3;
        assert!(d.validate().is_err());
    }

    #[test]
    fn transfer_time_formula() {
        let d = DeviceDescriptor::gpu_sim(1, 1 << 20).with_link(1e-5, 1e9);
        assert!((d.transfer_time(1_000_000) - 1.01e-3).abs() < 1e-15);
        assert_eq!(d.transfer_time(0), 0.0);
    }
}
