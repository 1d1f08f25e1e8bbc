//! Scenario harness: scripts, the simulation world, its trace and report.

pub mod report;
pub mod script;
pub mod sim;
pub mod trace;

pub use report::{cycles_csv, write_atomic, write_cycles_csv, write_report, CycleCounts, MetricsReport};
pub use script::{backserver_id, ScenarioScript, ScriptAction, ScriptError, ScriptEvent};
pub use sim::{run, HarnessError, RunOutput, SimConfig, Simulation};
pub use trace::{fold_report, Trace, TraceEvent, TraceKind};
