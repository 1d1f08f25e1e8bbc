//! Metrics report and its file outputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tempfile::NamedTempFile;

use crate::breaker::{OutcomeKind, Tallies};

/// Run summary. Field order is fixed so serialized reports are byte-stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub duration_min: f64,
    pub cycles: u64,
    pub fleet_size: usize,
    /// Running Backserver count -> simulated minutes spent at that count.
    pub uptime_histogram: BTreeMap<usize, f64>,
    pub instance_uptime_min: BTreeMap<String, f64>,
    pub per_instance_calls: BTreeMap<String, u64>,
    pub circuit_breaker: Tallies,
    pub gateway_usage: BTreeMap<String, u64>,
    pub drops: u64,
    pub commands_delivered: u64,
    pub telemetry_delivered: u64,
    pub quickest_recovery_ms: Option<u64>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn total_instance_minutes(&self) -> f64 {
        self.uptime_histogram.iter().map(|(n, m)| *n as f64 * m).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleCounts {
    pub cycle: u64,
    pub started_at_ms: u64,
    pub running_instances: usize,
    pub success: u64,
    pub failure: u64,
    pub timeout: u64,
    pub short_circuited: u64,
}

impl CycleCounts {
    pub fn add(&mut self, kind: OutcomeKind) {
        match kind {
            OutcomeKind::Success => self.success += 1,
            OutcomeKind::Failure => self.failure += 1,
            OutcomeKind::Timeout => self.timeout += 1,
            OutcomeKind::ShortCircuited => self.short_circuited += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.success + self.failure + self.timeout + self.short_circuited
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// so a failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_report(report: &MetricsReport, path: &Path) -> std::io::Result<()> {
    write_atomic(path, report.to_json().as_bytes())
}

pub fn cycles_csv(cycles: &[CycleCounts]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in cycles {
        w.serialize(c)?;
    }
    w.into_inner().map_err(|e| e.into_error().into())
}

pub fn write_cycles_csv(cycles: &[CycleCounts], path: &Path) -> std::io::Result<()> {
    let bytes = cycles_csv(cycles).map_err(std::io::Error::other)?;
    write_atomic(path, &bytes)
}
