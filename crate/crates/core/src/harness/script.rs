//! Scenario scripts: timed start/stop (and config) events over a fixed run.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simtime::{SimInstant, MILLIS_PER_MINUTE};

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("reading script: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing script: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("events are not sorted by time (event {index} at {at} precedes an earlier one)")]
    Unsorted { index: usize, at: SimInstant },
    #[error("event {index} at {at} is past the end of the run")]
    PastEnd { index: usize, at: SimInstant },
    #[error("event {index} references unknown instance {instance:?}")]
    UnknownInstance { index: usize, instance: String },
    #[error("event {index} has an empty instance set")]
    EmptyInstanceSet { index: usize },
    #[error("duration and cycle must be positive")]
    NonPositiveTiming,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScriptAction {
    Start { instances: Vec<String> },
    Stop { instances: Vec<String> },
    SetConfig { service_id: String, key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEvent {
    pub at: SimInstant,
    pub action: ScriptAction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioScript {
    pub name: String,
    pub duration_ms: u64,
    pub cycle_ms: u64,
    pub events: Vec<ScriptEvent>,
}

#[derive(Serialize, Deserialize)]
struct ScriptFile {
    name: String,
    duration_min: u64,
    cycle_min: u64,
    events: Vec<EventFile>,
}

#[derive(Serialize, Deserialize)]
struct EventFile {
    at_min: u64,
    #[serde(flatten)]
    action: ScriptAction,
}

pub fn backserver_id(n: usize) -> String {
    format!("backserver-{n}")
}

fn ids(ns: &[usize]) -> Vec<String> {
    ns.iter().map(|&n| backserver_id(n)).collect()
}

impl ScenarioScript {
    /// The three back-to-back failure scenarios over one hour with four Backservers.
    ///
    /// 1. two instances down 00:10 to 00:15;
    /// 2. all down at 00:20, back one by one every five minutes from 00:25 to 00:40;
    /// 3. all down 00:45 to 00:50.
    pub fn builtin() -> Self {
        let at = SimInstant::from_minutes;
        let start = |ns: &[usize]| ScriptAction::Start { instances: ids(ns) };
        let stop = |ns: &[usize]| ScriptAction::Stop { instances: ids(ns) };
        let events = vec![
            ScriptEvent { at: at(10), action: stop(&[3, 4]) },
            ScriptEvent { at: at(15), action: start(&[3, 4]) },
            ScriptEvent { at: at(20), action: stop(&[1, 2, 3, 4]) },
            ScriptEvent { at: at(25), action: start(&[1]) },
            ScriptEvent { at: at(30), action: start(&[2]) },
            ScriptEvent { at: at(35), action: start(&[3]) },
            ScriptEvent { at: at(40), action: start(&[4]) },
            ScriptEvent { at: at(45), action: stop(&[1, 2, 3, 4]) },
            ScriptEvent { at: at(50), action: start(&[1, 2, 3, 4]) },
        ];
        ScenarioScript {
            name: "builtin-three-scenarios".to_owned(),
            duration_ms: 60 * MILLIS_PER_MINUTE,
            cycle_ms: MILLIS_PER_MINUTE,
            events,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let file: ScriptFile = serde_json::from_str(text)?;
        Ok(ScenarioScript {
            name: file.name,
            duration_ms: file.duration_min * MILLIS_PER_MINUTE,
            cycle_ms: file.cycle_min * MILLIS_PER_MINUTE,
            events: file
                .events
                .into_iter()
                .map(|e| ScriptEvent { at: SimInstant::from_minutes(e.at_min), action: e.action })
                .collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Serializes to the file format. Times are truncated to whole minutes.
    pub fn to_json(&self) -> String {
        let file = ScriptFile {
            name: self.name.clone(),
            duration_min: self.duration_ms / MILLIS_PER_MINUTE,
            cycle_min: self.cycle_ms / MILLIS_PER_MINUTE,
            events: self
                .events
                .iter()
                .map(|e| EventFile { at_min: e.at.as_millis() / MILLIS_PER_MINUTE, action: e.action.clone() })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("script serializes")
    }

    /// Checks ordering, bounds, and that every instance is one of `known`.
    pub fn validate(&self, known: &BTreeSet<String>) -> Result<(), ScriptError> {
        if self.duration_ms == 0 || self.cycle_ms == 0 {
            return Err(ScriptError::NonPositiveTiming);
        }
        let mut prev = SimInstant::ZERO;
        for (index, ev) in self.events.iter().enumerate() {
            if ev.at < prev {
                return Err(ScriptError::Unsorted { index, at: ev.at });
            }
            prev = ev.at;
            if ev.at.as_millis() > self.duration_ms {
                return Err(ScriptError::PastEnd { index, at: ev.at });
            }
            if let ScriptAction::Start { instances } | ScriptAction::Stop { instances } = &ev.action {
                if instances.is_empty() {
                    return Err(ScriptError::EmptyInstanceSet { index });
                }
                if let Some(unknown) = instances.iter().find(|i| !known.contains(*i)) {
                    return Err(ScriptError::UnknownInstance { index, instance: unknown.clone() });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn known() -> BTreeSet<String> {
        (1..=4).map(backserver_id).collect()
    }

    /// Running-count durations (minutes) for a minute-granular script with
    /// all four instances up at 00:00, computed by walking minute by minute.
    fn minute_histogram(script: &ScenarioScript) -> BTreeMap<usize, u64> {
        let mut up: BTreeSet<String> = known();
        let mut hist = BTreeMap::new();
        for minute in 0..script.duration_ms / MILLIS_PER_MINUTE {
            for ev in script.events.iter().filter(|e| e.at == SimInstant::from_minutes(minute)) {
                match &ev.action {
                    ScriptAction::Start { instances } => up.extend(instances.iter().cloned()),
                    ScriptAction::Stop { instances } => instances.iter().for_each(|i| {
                        up.remove(i);
                    }),
                    ScriptAction::SetConfig { .. } => {}
                }
            }
            *hist.entry(up.len()).or_insert(0) += 1;
        }
        hist
    }

    #[test]
    fn builtin_histogram_matches_table() {
        let hist = minute_histogram(&ScenarioScript::builtin());
        let expected: BTreeMap<usize, u64> = [(0, 10), (1, 5), (2, 10), (3, 5), (4, 30)].into_iter().collect();
        assert_eq!(hist, expected);
        let instance_minutes: u64 = hist.iter().map(|(n, m)| *n as u64 * m).sum();
        assert_eq!(instance_minutes, 160);
    }

    #[test]
    fn gradual_restart_offset_is_forced() {
        // Enumerate the candidate first-restart offsets of the one-by-one
        // scenario; only 00:25 reproduces the target histogram.
        let target: BTreeMap<usize, u64> = [(0, 10), (1, 5), (2, 10), (3, 5), (4, 30)].into_iter().collect();
        let matching: Vec<u64> = [20u64, 25]
            .into_iter()
            .filter(|&first| {
                let mut script = ScenarioScript::builtin();
                script.events.retain(|e| !matches!(e.at.as_millis() / MILLIS_PER_MINUTE, 25 | 30 | 35 | 40));
                for k in 0..4 {
                    script.events.push(ScriptEvent {
                        at: SimInstant::from_minutes(first + 5 * k as u64),
                        action: ScriptAction::Start { instances: vec![backserver_id(k + 1)] },
                    });
                }
                script.events.sort_by_key(|e| e.at);
                minute_histogram(&script) == target
            })
            .collect();
        assert_eq!(matching, vec![25]);
    }

    #[test]
    fn builtin_is_valid() {
        ScenarioScript::builtin().validate(&known()).unwrap();
    }

    #[test]
    fn file_format_round_trip() {
        let s = ScenarioScript::builtin();
        assert_eq!(ScenarioScript::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn parses_documented_format() {
        let text = r#"{
            "name": "demo", "duration_min": 30, "cycle_min": 1,
            "events": [
                {"at_min": 5, "action": "stop", "instances": ["backserver-1"]},
                {"at_min": 8, "action": "set_config", "service_id": "client", "key": "next_move_direction", "value": "STOP"},
                {"at_min": 10, "action": "start", "instances": ["backserver-1"]}
            ]
        }"#;
        let s = ScenarioScript::from_json(text).unwrap();
        assert_eq!(s.duration_ms, 30 * MILLIS_PER_MINUTE);
        assert_eq!(s.events.len(), 3);
        s.validate(&known()).unwrap();
    }

    #[test]
    fn validation_errors() {
        let mut s = ScenarioScript::builtin();
        s.events.swap(0, 1);
        assert!(matches!(s.validate(&known()), Err(ScriptError::Unsorted { .. })));

        let mut s = ScenarioScript::builtin();
        s.events[0].action = ScriptAction::Stop { instances: vec!["backserver-9".into()] };
        assert!(matches!(s.validate(&known()), Err(ScriptError::UnknownInstance { .. })));

        let mut s = ScenarioScript::builtin();
        s.events.push(ScriptEvent { at: SimInstant::from_minutes(61), action: ScriptAction::Start { instances: vec![backserver_id(1)] } });
        assert!(matches!(s.validate(&known()), Err(ScriptError::PastEnd { .. })));

        let mut s = ScenarioScript::builtin();
        s.events[0].action = ScriptAction::Stop { instances: vec![] };
        assert!(matches!(s.validate(&known()), Err(ScriptError::EmptyInstanceSet { .. })));

        let mut s = ScenarioScript::builtin();
        s.cycle_ms = 0;
        assert!(matches!(s.validate(&known()), Err(ScriptError::NonPositiveTiming)));

        assert!(matches!(ScenarioScript::from_json("{"), Err(ScriptError::Parse(_))));
    }
}
