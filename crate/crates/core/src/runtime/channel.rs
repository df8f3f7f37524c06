//! Channel model for transfer-time estimates and the per-layer sweep table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("latency must be non-negative and finite, got {0}")]
    Latency(f64),
}

/// Reliable link with fixed bandwidth (bytes/s) and one-way latency (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    bandwidth: f64,
    latency: f64,
}

impl ChannelModel {
    pub fn new(bandwidth: f64, latency: f64) -> Result<Self, ChannelError> {
        if !(bandwidth.is_finite() && bandwidth > 0.0) {
            return Err(ChannelError::Bandwidth(bandwidth));
        }
        if !(latency.is_finite() && latency >= 0.0) {
            return Err(ChannelError::Latency(latency));
        }
        Ok(Self { bandwidth, latency })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn latency(&self) -> f64 {
        self.latency
    }
}

impl Default for ChannelModel {
    /// 10 MB/s with 20 ms latency.
    fn default() -> Self {
        Self {
            bandwidth: 10e6,
            latency: 0.020,
        }
    }
}

pub fn estimate_transfer(payload_bytes: usize, channel: &ChannelModel) -> f64 {
    channel.latency + payload_bytes as f64 / channel.bandwidth
}

/// One evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub layer: usize,
    pub layer_name: String,
    /// Bytes of the unsplit layer output as f32.
    pub raw_bytes: usize,
    /// Bytes the head actually sends.
    pub encoded_bytes: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub layer_name: String,
    pub raw_bytes: usize,
    pub encoded_bytes: usize,
    pub estimated_transfer_s: f64,
    pub accuracy: f64,
}

/// One row per entry, sorted by layer index.
pub fn sweep_report(entries: &[SweepEntry], channel: &ChannelModel) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = entries
        .iter()
        .map(|e| SweepRow {
            layer: e.layer,
            layer_name: e.layer_name.clone(),
            raw_bytes: e.raw_bytes,
            encoded_bytes: e.encoded_bytes,
            estimated_transfer_s: estimate_transfer(e.encoded_bytes, channel),
            accuracy: e.accuracy,
        })
        .collect();
    rows.sort_by_key(|r| r.layer);
    rows
}
