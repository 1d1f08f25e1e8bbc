//! Append-only run trace. Every report field can be re-derived from it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::breaker::{OutcomeKind, Tallies};
use crate::fleet::CommandMessage;
use crate::services::StopMode;
use crate::simtime::SimInstant;

use super::report::{CycleCounts, MetricsReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceKind {
    RunStarted { scenario: String, seed: u64, duration_ms: u64, cycle_ms: u64, fleet_size: usize },
    RouteAdded { service_id: String },
    InstanceStarted { service_id: String, instance_id: String, version: String },
    InstanceStopped { service_id: String, instance_id: String, mode: StopMode },
    Registered { service_id: String, instance_id: String },
    Deregistered { service_id: String, instance_id: String },
    Evicted { instance_id: String },
    Heartbeat { instance_id: String },
    Membership { service_id: String, members: Vec<String> },
    CycleStarted { cycle: u64 },
    Routed { service_id: String, request_id: u64, instance_id: Option<String> },
    Outcome {
        request_id: u64,
        cycle: u64,
        rover_id: String,
        kind: OutcomeKind,
        instance_id: Option<String>,
        issued_at_ms: SimInstant,
        latency_ms: u64,
    },
    BreakerMode { mode: String },
    Handled { instance_id: String, request_id: u64, rover_id: String, sequence: u64 },
    Published { topic: String },
    Delivered { topic: String },
    Dropped { topic: String },
    CommandApplied { command: CommandMessage, applied: bool },
    ConfigSet { service_id: String, key: String, value: String, revision: u64 },
    ConfigApplied { service_id: String, key: String, revision: u64, accepted: bool },
    RunFinished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub at_ms: SimInstant,
    #[serde(flatten)]
    pub kind: TraceKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    events: Vec<TraceEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, at: SimInstant, kind: TraceKind) {
        debug_assert!(self.events.last().is_none_or(|e| e.at_ms <= at));
        self.events.push(TraceEvent { at_ms: at, kind });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for ev in &self.events {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn from_jsonl(text: &str) -> serde_json::Result<Self> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { events })
    }
}

fn minutes(ms: u64) -> f64 {
    ms as f64 / 60_000.0
}

/// Recomputes the metrics report and per-cycle counts purely from a trace.
pub fn fold_report(trace: &Trace) -> (MetricsReport, Vec<CycleCounts>) {
    let mut scenario = String::new();
    let mut seed = 0;
    let mut duration_ms = 0;
    let mut fleet_size = 0;
    let mut backservers: BTreeSet<String> = BTreeSet::new();
    let mut running: BTreeSet<String> = BTreeSet::new();
    let mut last_change = SimInstant::ZERO;
    let mut hist_ms: BTreeMap<usize, u64> = BTreeMap::new();
    let mut up_ms: BTreeMap<String, u64> = BTreeMap::new();
    let mut up_since: BTreeMap<String, SimInstant> = BTreeMap::new();
    let mut ever_stopped: BTreeSet<String> = BTreeSet::new();
    let mut restart_at: BTreeMap<String, SimInstant> = BTreeMap::new();
    let mut quickest: Option<u64> = None;
    let mut calls: BTreeMap<String, u64> = BTreeMap::new();
    let mut tallies = Tallies::default();
    let mut usage: BTreeMap<String, u64> = BTreeMap::new();
    let mut drops = 0;
    let mut commands_delivered = 0;
    let mut telemetry_delivered = 0;
    let mut cycles: Vec<CycleCounts> = Vec::new();

    let mut close_segment = |running: &BTreeSet<String>, last_change: &mut SimInstant, now: SimInstant| {
        *hist_ms.entry(running.len()).or_insert(0) += now.since(*last_change);
        *last_change = now;
    };

    for ev in trace.events() {
        let now = ev.at_ms;
        match &ev.kind {
            TraceKind::RunStarted { scenario: s, seed: sd, duration_ms: d, fleet_size: f, .. } => {
                scenario = s.clone();
                seed = *sd;
                duration_ms = *d;
                fleet_size = *f;
            }
            TraceKind::RouteAdded { service_id } => {
                usage.entry(service_id.clone()).or_insert(0);
            }
            TraceKind::InstanceStarted { service_id, instance_id, .. } if service_id == "backserver" => {
                backservers.insert(instance_id.clone());
                calls.entry(instance_id.clone()).or_insert(0);
                close_segment(&running, &mut last_change, now);
                running.insert(instance_id.clone());
                up_since.insert(instance_id.clone(), now);
                if ever_stopped.contains(instance_id) {
                    restart_at.insert(instance_id.clone(), now);
                }
            }
            TraceKind::InstanceStopped { service_id, instance_id, .. } if service_id == "backserver" => {
                close_segment(&running, &mut last_change, now);
                running.remove(instance_id);
                ever_stopped.insert(instance_id.clone());
                restart_at.remove(instance_id);
                if let Some(since) = up_since.remove(instance_id) {
                    *up_ms.entry(instance_id.clone()).or_insert(0) += now.since(since);
                }
            }
            TraceKind::CycleStarted { cycle } => {
                debug_assert_eq!(*cycle as usize, cycles.len());
                cycles.push(CycleCounts {
                    cycle: *cycle,
                    started_at_ms: now.as_millis(),
                    running_instances: running.len(),
                    ..CycleCounts::default()
                });
            }
            TraceKind::Routed { service_id, .. } => {
                *usage.entry(service_id.clone()).or_insert(0) += 1;
            }
            TraceKind::Outcome { cycle, kind, instance_id, issued_at_ms, .. } => {
                tallies.add(*kind);
                if let Some(c) = cycles.get_mut(*cycle as usize) {
                    c.add(*kind);
                }
                if *kind == OutcomeKind::Success {
                    if let Some(id) = instance_id {
                        if let Some(start) = restart_at.remove(id) {
                            if *issued_at_ms >= start {
                                let rec = issued_at_ms.since(start);
                                quickest = Some(quickest.map_or(rec, |q| q.min(rec)));
                            } else {
                                restart_at.insert(id.clone(), start);
                            }
                        }
                    }
                }
            }
            TraceKind::Handled { instance_id, .. } => {
                *calls.entry(instance_id.clone()).or_insert(0) += 1;
            }
            TraceKind::Dropped { .. } => drops += 1,
            TraceKind::Delivered { topic } => {
                if topic.starts_with("command/") {
                    commands_delivered += 1;
                } else {
                    telemetry_delivered += 1;
                }
            }
            _ => {}
        }
    }

    let end = SimInstant::from_millis(duration_ms);
    close_segment(&running, &mut last_change, end);
    for (id, since) in up_since {
        *up_ms.entry(id).or_insert(0) += end.since(since);
    }
    let mut uptime_histogram: BTreeMap<usize, f64> = (0..=backservers.len()).map(|n| (n, 0.0)).collect();
    for (n, ms) in hist_ms {
        uptime_histogram.insert(n, minutes(ms));
    }
    let instance_uptime_min = backservers
        .iter()
        .map(|id| (id.clone(), minutes(up_ms.get(id).copied().unwrap_or(0))))
        .collect();

    let report = MetricsReport {
        scenario,
        seed,
        duration_min: minutes(duration_ms),
        cycles: cycles.len() as u64,
        fleet_size,
        uptime_histogram,
        instance_uptime_min,
        per_instance_calls: calls,
        circuit_breaker: tallies,
        gateway_usage: usage,
        drops,
        commands_delivered,
        telemetry_delivered,
        quickest_recovery_ms: quickest,
    };
    (report, cycles)
}
