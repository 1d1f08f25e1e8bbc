use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use otasim_core::harness::{fold_report, ScriptError};
use otasim_core::{ConfigServer, HarnessError, ScenarioScript, SimConfig, StopMode, Trace};

#[derive(Parser)]
#[command(name = "otasim", version, about = "Rover fleet OTA control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script and write report.json, trace.jsonl, cycles.csv and registry.json.
    Run {
        /// Script file, or `builtin` for the three-scenario hour.
        #[arg(long, default_value = "builtin")]
        script: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Wall-clock ms per simulated ms; 0 runs as fast as possible.
        #[arg(long, default_value_t = 0.0)]
        time_scale: f64,
        #[arg(long, default_value_t = 40)]
        fleet_size: usize,
        #[arg(long, default_value_t = 4)]
        backservers: usize,
        /// Stop instances by deregistering instead of crashing them.
        #[arg(long)]
        graceful: bool,
        /// Boot config: JSON object of "service_id.key" -> value.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Mirror every delivered payload as a JSON line to this TCP address.
        #[arg(long)]
        mirror_tcp: Option<String>,
    },
    /// Check a script without running it.
    Validate {
        #[arg(long)]
        script: String,
        #[arg(long, default_value_t = 4)]
        backservers: usize,
    },
    /// Recompute a report from a trace file and print it.
    Fold {
        #[arg(long)]
        trace: PathBuf,
    },
}

fn load_script(arg: &str) -> Result<ScenarioScript, ScriptError> {
    if arg == "builtin" {
        Ok(ScenarioScript::builtin())
    } else {
        ScenarioScript::load(Path::new(arg))
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { script, seed, out, time_scale, fleet_size, backservers, graceful, config, mirror_tcp } => {
            let script = load_script(&script)?;
            let boot_config = match config {
                Some(path) => ConfigServer::load(&path).with_context(|| format!("loading {}", path.display()))?,
                None => ConfigServer::new(),
            };
            let cfg = SimConfig {
                seed,
                fleet_size,
                backservers,
                stop_mode: if graceful { StopMode::Graceful } else { StopMode::Crash },
                time_scale,
                boot_config,
                mirror_addr: mirror_tcp,
                ..SimConfig::default()
            };
            let started = Instant::now();
            let output = otasim_core::run(&script, &cfg)?;
            output.write_to_dir(&out).with_context(|| format!("writing to {}", out.display()))?;
            let r = &output.report;
            println!("scenario {} seed {} ({} cycles) in {:.2?}", r.scenario, r.seed, r.cycles, started.elapsed());
            for (n, min) in &r.uptime_histogram {
                println!("  {n} running: {min:.1} min");
            }
            for (id, calls) in &r.per_instance_calls {
                println!("  {id}: {calls} calls");
            }
            let t = r.circuit_breaker;
            println!(
                "  breaker: {} success, {} failure, {} timeout, {} short-circuited",
                t.success, t.failure, t.timeout, t.short_circuited
            );
            match r.quickest_recovery_ms {
                Some(ms) => println!("  quickest recovery: {ms} ms"),
                None => println!("  quickest recovery: none"),
            }
            println!("wrote {}", out.display());
        }
        Command::Validate { script, backservers } => {
            let script = load_script(&script)?;
            let known = SimConfig { backservers, ..SimConfig::default() }.backserver_ids();
            script.validate(&known)?;
            println!("{}: {} events over {} min, ok", script.name, script.events.len(), script.duration_ms / 60_000);
        }
        Command::Fold { trace } => {
            let text = std::fs::read_to_string(&trace).with_context(|| format!("reading {}", trace.display()))?;
            let trace = Trace::from_jsonl(&text).context("parsing trace")?;
            print!("{}", fold_report(&trace).0.to_json());
        }
    }
    Ok(())
}

fn is_script_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<ScriptError>() || matches!(e.downcast_ref::<HarnessError>(), Some(HarnessError::Script(_)))
    })
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_script_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
