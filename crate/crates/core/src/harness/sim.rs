//! The simulation world: registry, gateway, services, broker and fleet wired
//! onto one event loop and driven by a scenario script.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::balancer::{BalancerConfig, RoundRobinBalancer};
use crate::breaker::{BreakerConfig, BreakerMode, CircuitBreaker, InvalidBreakerConfig, OutcomeKind, Tallies};
use crate::fleet::{Broker, CommandMessage, Envelope, Fleet, FleetError, PublishReceipt, Subscriber, Topic};
use crate::gateway::{ConfigChange, ConfigServer, Gateway};
use crate::registry::{InstanceRecord, Registry, RegistryConfig, RegistryError};
use crate::services::{
    BackserverInstance, CallStart, ClientConfig, ClientService, ServiceError, StopMode, BACKSERVER_SERVICE_ID,
    CLIENT_SERVICE_ID,
};
use crate::simtime::{EventHandle, Scheduler, SimInstant};

use super::report::{write_atomic, write_cycles_csv, write_report, CycleCounts, MetricsReport};
use super::script::{backserver_id, ScenarioScript, ScriptAction, ScriptError};
use super::trace::{Trace, TraceKind};

const CLIENT_INSTANCE_ID: &str = "client-1";
const CLIENT_ADDRESS: &str = "10.0.1.1:9000";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Breaker(#[from] InvalidBreakerConfig),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error("fleet size must be at least 1")]
    EmptyFleet,
    #[error("writing output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub seed: u64,
    pub fleet_size: usize,
    pub backservers: usize,
    pub stop_mode: StopMode,
    /// Wall-clock ms per simulated ms; 0 runs as fast as possible.
    pub time_scale: f64,
    pub registry: RegistryConfig,
    pub breaker: BreakerConfig,
    pub refresh_interval_ms: u64,
    pub request_latency_ms: u64,
    pub response_latency_ms: u64,
    pub broker_delay_ms: u64,
    pub commands_per_cycle_per_rover: usize,
    pub boot_config: ConfigServer,
    /// Optional TCP address receiving every delivered payload as a JSON line.
    pub mirror_addr: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            fleet_size: 40,
            backservers: 4,
            stop_mode: StopMode::Crash,
            time_scale: 0.0,
            registry: RegistryConfig::default(),
            breaker: BreakerConfig::default(),
            refresh_interval_ms: 2_000,
            request_latency_ms: 5,
            response_latency_ms: 5,
            broker_delay_ms: crate::fleet::DEFAULT_DELIVERY_DELAY_MS,
            commands_per_cycle_per_rover: 1,
            boot_config: ConfigServer::new(),
            mirror_addr: None,
        }
    }
}

impl SimConfig {
    pub fn backserver_ids(&self) -> BTreeSet<String> {
        (1..=self.backservers).map(backserver_id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SimEvent {
    Script(usize),
    ClientTick,
    TelemetryTick,
    RegistrySweep,
    BalancerRefresh,
    Heartbeat { instance_id: String, generation: u32 },
    ClientHeartbeat,
    RequestArrive { request_id: u64 },
    ResponseArrive { request_id: u64, kind: OutcomeKind, body: String },
    CallTimeout { request_id: u64 },
    Deliver(Envelope),
    ConfigNotify(ConfigChange),
}

#[derive(Debug, Clone)]
struct PendingCall {
    cycle: u64,
    command: CommandMessage,
    instance_id: String,
    issued_at: SimInstant,
    timeout: EventHandle,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: MetricsReport,
    pub cycles: Vec<CycleCounts>,
    pub trace: Trace,
    pub registry: Vec<InstanceRecord>,
    pub rovers: Vec<crate::fleet::RoverState>,
}

impl RunOutput {
    /// Writes `report.json`, `trace.jsonl`, `cycles.csv` and `registry.json` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), HarnessError> {
        std::fs::create_dir_all(dir)?;
        write_report(&self.report, &dir.join("report.json"))?;
        write_cycles_csv(&self.cycles, &dir.join("cycles.csv"))?;
        let mut trace = Vec::new();
        self.trace.write_jsonl(&mut trace)?;
        write_atomic(&dir.join("trace.jsonl"), &trace)?;
        let registry = serde_json::to_string_pretty(&self.registry).expect("records serialize");
        write_atomic(&dir.join("registry.json"), registry.as_bytes())?;
        Ok(())
    }
}

pub struct Simulation {
    script: ScenarioScript,
    cfg: SimConfig,
    sched: Scheduler<SimEvent>,
    end: SimInstant,
    registry: Registry,
    gateway: Gateway,
    config: ConfigServer,
    broker: Broker,
    fleet: Fleet,
    client: ClientService,
    backservers: BTreeMap<String, BackserverInstance>,
    telemetry_rng: ChaCha8Rng,
    trace: Trace,
    pending: BTreeMap<u64, PendingCall>,
    next_request_id: u64,
    next_cycle: u64,
    cycles: Vec<CycleCounts>,
    membership: BTreeMap<String, Vec<String>>,
    breaker_mode: &'static str,
    // [start, end) running intervals per Backserver
    intervals: BTreeMap<String, Vec<(SimInstant, Option<SimInstant>)>>,
    awaiting_first_call: BTreeMap<String, SimInstant>,
    quickest_recovery: Option<u64>,
}

fn mode_name(mode: BreakerMode) -> &'static str {
    match mode {
        BreakerMode::Closed => "closed",
        BreakerMode::Open { .. } => "open",
        BreakerMode::HalfOpen { .. } => "half_open",
    }
}

impl Simulation {
    pub fn new(script: ScenarioScript, cfg: SimConfig) -> Result<Self, HarnessError> {
        if cfg.fleet_size == 0 {
            return Err(HarnessError::EmptyFleet);
        }
        script.validate(&cfg.backserver_ids())?;
        let registry = Registry::new(cfg.registry)?;
        let breaker = CircuitBreaker::new(cfg.breaker)?;
        let fleet = Fleet::new(cfg.fleet_size);
        let mut client_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let client_cfg = ClientConfig {
            cycle_ms: script.cycle_ms,
            fleet_size: cfg.fleet_size,
            commands_per_cycle_per_rover: cfg.commands_per_cycle_per_rover,
        };
        let client = ClientService::new(
            CLIENT_INSTANCE_ID,
            CLIENT_ADDRESS,
            client_cfg,
            breaker,
            fleet.ids().map(str::to_owned),
            &mut client_rng,
        );
        let backservers = cfg
            .backserver_ids()
            .into_iter()
            .enumerate()
            .map(|(i, id)| {
                let addr = format!("10.0.0.{}:8080", i + 1);
                (id.clone(), BackserverInstance::new(&id, &addr))
            })
            .collect();
        let mut sched = Scheduler::new();
        sched.set_time_scale(cfg.time_scale);
        let mut broker = Broker::new(cfg.broker_delay_ms);
        if let Some(addr) = &cfg.mirror_addr {
            broker.set_mirror(crate::fleet::connect_mirror(addr.as_str())?);
        }
        Ok(Simulation {
            end: SimInstant::from_millis(script.duration_ms),
            telemetry_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e1e_3e72),
            config: cfg.boot_config.clone(),
            script,
            cfg,
            sched,
            registry,
            gateway: Gateway::new(),
            broker,
            fleet,
            client,
            backservers,
            trace: Trace::new(),
            pending: BTreeMap::new(),
            next_request_id: 0,
            next_cycle: 0,
            cycles: Vec::new(),
            membership: BTreeMap::new(),
            breaker_mode: "closed",
            intervals: BTreeMap::new(),
            awaiting_first_call: BTreeMap::new(),
            quickest_recovery: None,
        })
    }

    fn now(&self) -> SimInstant {
        self.sched.now()
    }

    fn log(&mut self, kind: TraceKind) {
        let now = self.sched.now();
        self.trace.push(now, kind);
    }

    fn boot(&mut self) -> Result<(), HarnessError> {
        self.log(TraceKind::RunStarted {
            scenario: self.script.name.clone(),
            seed: self.cfg.seed,
            duration_ms: self.script.duration_ms,
            cycle_ms: self.script.cycle_ms,
            fleet_size: self.cfg.fleet_size,
        });
        // script events first so they win ties against periodic timers
        for (i, ev) in self.script.events.iter().enumerate() {
            self.sched.schedule_at(ev.at, SimEvent::Script(i)).expect("validated script is in the future");
        }

        self.config.subscribe(CLIENT_SERVICE_ID);
        self.client.load_config(&self.config)?;

        self.registry.register(self.client.record_for_registry(), self.now())?;
        self.log(TraceKind::Registered {
            service_id: CLIENT_SERVICE_ID.into(),
            instance_id: CLIENT_INSTANCE_ID.into(),
        });
        for sid in [BACKSERVER_SERVICE_ID, CLIENT_SERVICE_ID] {
            self.gateway.add_route(RoundRobinBalancer::new(BalancerConfig {
                refresh_interval_ms: self.cfg.refresh_interval_ms,
                source_service_id: sid.to_owned(),
            }));
            self.log(TraceKind::RouteAdded { service_id: sid.to_owned() });
        }
        let ids: Vec<String> = self.backservers.keys().cloned().collect();
        for id in &ids {
            self.start_instance(id)?;
        }

        let rover_ids: Vec<String> = self.fleet.ids().map(str::to_owned).collect();
        for id in &rover_ids {
            self.broker.attach(id);
            self.broker.subscribe(&Topic::Telemetry(id.clone()).to_string(), Subscriber::Cloud)?;
        }

        self.refresh_balancers();

        let hb = self.cfg.registry.heartbeat_interval_ms;
        self.sched.schedule_in(0, SimEvent::ClientTick);
        self.sched.schedule_in(self.script.cycle_ms / 2, SimEvent::TelemetryTick);
        self.sched.schedule_in(hb, SimEvent::RegistrySweep);
        self.sched.schedule_in(hb, SimEvent::ClientHeartbeat);
        self.sched.schedule_in(self.cfg.refresh_interval_ms, SimEvent::BalancerRefresh);
        Ok(())
    }

    fn schedule_periodic(&mut self, period: u64, event: SimEvent) {
        if self.now().plus(period) <= self.end {
            self.sched.schedule_in(period, event);
        }
    }

    fn dispatch(&mut self, event: SimEvent) -> Result<(), HarnessError> {
        match event {
            SimEvent::Script(i) => self.run_script_event(i)?,
            SimEvent::ClientTick => self.client_tick(),
            SimEvent::TelemetryTick => self.telemetry_tick()?,
            SimEvent::RegistrySweep => {
                for instance_id in self.registry.sweep_expired(self.now()) {
                    self.log(TraceKind::Evicted { instance_id });
                }
                self.schedule_periodic(self.cfg.registry.heartbeat_interval_ms, SimEvent::RegistrySweep);
            }
            SimEvent::BalancerRefresh => {
                self.refresh_balancers();
                self.schedule_periodic(self.cfg.refresh_interval_ms, SimEvent::BalancerRefresh);
            }
            SimEvent::Heartbeat { instance_id, generation } => self.heartbeat(instance_id, generation)?,
            SimEvent::ClientHeartbeat => {
                let now = self.now();
                if self.registry.heartbeat(CLIENT_SERVICE_ID, CLIENT_INSTANCE_ID, now).is_err() {
                    self.registry.register(self.client.record_for_registry(), now)?;
                    self.log(TraceKind::Registered {
                        service_id: CLIENT_SERVICE_ID.into(),
                        instance_id: CLIENT_INSTANCE_ID.into(),
                    });
                }
                self.log(TraceKind::Heartbeat { instance_id: CLIENT_INSTANCE_ID.into() });
                self.schedule_periodic(self.cfg.registry.heartbeat_interval_ms, SimEvent::ClientHeartbeat);
            }
            SimEvent::RequestArrive { request_id } => self.request_arrive(request_id)?,
            SimEvent::ResponseArrive { request_id, kind, body } => {
                if let Some(call) = self.pending.remove(&request_id) {
                    self.sched.cancel(call.timeout);
                    self.finish_call(request_id, call, kind, Some(body));
                }
            }
            SimEvent::CallTimeout { request_id } => {
                if let Some(call) = self.pending.remove(&request_id) {
                    let instance = call.instance_id.clone();
                    self.finish_call(request_id, call, OutcomeKind::Timeout, None);
                    if let Some(b) = self.gateway.balancer_mut(BACKSERVER_SERVICE_ID) {
                        b.report_unhealthy(&instance);
                    }
                    self.note_membership();
                }
            }
            SimEvent::Deliver(envelope) => self.deliver(envelope)?,
            SimEvent::ConfigNotify(change) => {
                if change.service_id == CLIENT_SERVICE_ID {
                    let accepted = self.client.apply_config(&change).is_ok();
                    self.log(TraceKind::ConfigApplied {
                        service_id: change.service_id,
                        key: change.key,
                        revision: change.revision,
                        accepted,
                    });
                }
            }
        }
        Ok(())
    }

    fn run_script_event(&mut self, index: usize) -> Result<(), HarnessError> {
        let action = self.script.events[index].action.clone();
        match action {
            ScriptAction::Start { instances } => {
                for id in &instances {
                    self.start_instance(id)?;
                }
            }
            ScriptAction::Stop { instances } => {
                for id in &instances {
                    self.stop_instance(id);
                }
            }
            ScriptAction::SetConfig { service_id, key, value } => {
                let (revision, change) = self.config.set(&service_id, &key, &value);
                self.log(TraceKind::ConfigSet { service_id, key, value, revision });
                if let Some(change) = change {
                    self.sched.schedule_in(0, SimEvent::ConfigNotify(change));
                }
            }
        }
        Ok(())
    }

    fn start_instance(&mut self, id: &str) -> Result<(), HarnessError> {
        let now = self.now();
        let srv = self.backservers.get_mut(id).expect("validated instance id");
        if !srv.start(&mut self.registry, now)? {
            return Ok(());
        }
        let (version, generation) = (srv.version.clone(), srv.generation());
        self.log(TraceKind::InstanceStarted {
            service_id: BACKSERVER_SERVICE_ID.into(),
            instance_id: id.to_owned(),
            version,
        });
        self.log(TraceKind::Registered { service_id: BACKSERVER_SERVICE_ID.into(), instance_id: id.to_owned() });
        let spans = self.intervals.entry(id.to_owned()).or_default();
        if !spans.is_empty() {
            self.awaiting_first_call.insert(id.to_owned(), now);
        }
        spans.push((now, None));
        self.sched.schedule_in(
            self.cfg.registry.heartbeat_interval_ms,
            SimEvent::Heartbeat { instance_id: id.to_owned(), generation },
        );
        Ok(())
    }

    fn stop_instance(&mut self, id: &str) {
        let now = self.now();
        let mode = self.cfg.stop_mode;
        let srv = self.backservers.get_mut(id).expect("validated instance id");
        if !srv.stop(&mut self.registry, mode) {
            return;
        }
        self.log(TraceKind::InstanceStopped { service_id: BACKSERVER_SERVICE_ID.into(), instance_id: id.to_owned(), mode });
        if mode == StopMode::Graceful {
            self.log(TraceKind::Deregistered { service_id: BACKSERVER_SERVICE_ID.into(), instance_id: id.to_owned() });
        }
        if let Some(last) = self.intervals.get_mut(id).and_then(|v| v.last_mut()) {
            last.1 = Some(now);
        }
        self.awaiting_first_call.remove(id);
    }

    fn heartbeat(&mut self, instance_id: String, generation: u32) -> Result<(), HarnessError> {
        let now = self.now();
        let srv = &self.backservers[&instance_id];
        if !srv.running || srv.generation() != generation {
            return Ok(());
        }
        if srv.heartbeat(&mut self.registry, now)? {
            self.log(TraceKind::Registered { service_id: BACKSERVER_SERVICE_ID.into(), instance_id: instance_id.clone() });
        }
        self.log(TraceKind::Heartbeat { instance_id: instance_id.clone() });
        self.schedule_periodic(self.cfg.registry.heartbeat_interval_ms, SimEvent::Heartbeat { instance_id, generation });
        Ok(())
    }

    fn refresh_balancers(&mut self) {
        let now = self.now();
        self.gateway.refresh_all(&self.registry, now);
        self.note_membership();
    }

    fn note_membership(&mut self) {
        let mut changes = Vec::new();
        for sid in [BACKSERVER_SERVICE_ID, CLIENT_SERVICE_ID] {
            if let Some(b) = self.gateway.balancer(sid) {
                let members: Vec<String> = b.healthy().into_iter().map(str::to_owned).collect();
                if self.membership.get(sid) != Some(&members) {
                    self.membership.insert(sid.to_owned(), members.clone());
                    changes.push((sid.to_owned(), members));
                }
            }
        }
        for (service_id, members) in changes {
            self.log(TraceKind::Membership { service_id, members });
        }
    }

    fn note_breaker(&mut self) {
        let mode = mode_name(self.client.breaker().mode());
        if mode != self.breaker_mode {
            self.breaker_mode = mode;
            self.log(TraceKind::BreakerMode { mode: mode.to_owned() });
        }
    }

    fn client_tick(&mut self) {
        let now = self.now();
        let cycle = self.next_cycle;
        self.next_cycle += 1;
        self.log(TraceKind::CycleStarted { cycle });
        let running = self.backservers.values().filter(|b| b.running).count();
        self.cycles.push(CycleCounts { cycle, started_at_ms: now.as_millis(), running_instances: running, ..Default::default() });

        let rovers: Vec<String> = self.client.rover_ids().map(str::to_owned).collect();
        for rover in &rovers {
            for _ in 0..self.client.config().commands_per_cycle_per_rover {
                self.issue_call(cycle, rover);
            }
        }
        let cycle_ms = self.client.config().cycle_ms;
        if now.plus(cycle_ms) < self.end {
            self.sched.schedule_in(cycle_ms, SimEvent::ClientTick);
        }
    }

    fn issue_call(&mut self, cycle: u64, rover: &str) {
        let now = self.now();
        let command = self.client.next_command(rover, now);
        let request_id = self.next_request_id;
        self.next_request_id += 1;
        let (start, _) = self.client.begin_call(&mut self.gateway, now);
        let immediate = |kind, instance_id| TraceKind::Outcome {
            request_id,
            cycle,
            rover_id: rover.to_owned(),
            kind,
            instance_id,
            issued_at_ms: now,
            latency_ms: 0,
        };
        match start {
            CallStart::ShortCircuited(_) => {
                self.log(immediate(OutcomeKind::ShortCircuited, None));
                self.cycles[cycle as usize].add(OutcomeKind::ShortCircuited);
            }
            CallStart::NoInstance => {
                self.log(TraceKind::Routed { service_id: BACKSERVER_SERVICE_ID.into(), request_id, instance_id: None });
                self.log(immediate(OutcomeKind::Failure, None));
                self.cycles[cycle as usize].add(OutcomeKind::Failure);
            }
            CallStart::Dispatched(target) => {
                self.log(TraceKind::Routed {
                    service_id: BACKSERVER_SERVICE_ID.into(),
                    request_id,
                    instance_id: Some(target.instance_id.clone()),
                });
                self.sched.schedule_in(self.cfg.request_latency_ms, SimEvent::RequestArrive { request_id });
                let timeout = self.sched.schedule_in(self.client.breaker().config().call_timeout_ms, SimEvent::CallTimeout { request_id });
                self.pending.insert(
                    request_id,
                    PendingCall { cycle, command, instance_id: target.instance_id, issued_at: now, timeout },
                );
            }
        }
        self.note_breaker();
    }

    fn request_arrive(&mut self, request_id: u64) -> Result<(), HarnessError> {
        let now = self.now();
        let Some(call) = self.pending.get(&request_id) else {
            return Ok(());
        };
        let srv = self.backservers.get_mut(&call.instance_id).expect("routed to a known instance");
        if !srv.running {
            // no reply; the caller's timeout fires
            return Ok(());
        }
        let receipt = srv.handle(&call.command, &mut self.broker, now)?;
        let topic = Topic::Command(call.command.rover_id.clone()).to_string();
        let handled = TraceKind::Handled {
            instance_id: call.instance_id.clone(),
            request_id,
            rover_id: call.command.rover_id.clone(),
            sequence: call.command.sequence,
        };
        self.log(handled);
        self.after_publish(topic, receipt.publish);
        self.sched.schedule_in(
            self.cfg.response_latency_ms,
            SimEvent::ResponseArrive { request_id, kind: receipt.kind, body: receipt.body },
        );
        Ok(())
    }

    fn after_publish(&mut self, topic: String, receipt: PublishReceipt) {
        self.log(TraceKind::Published { topic: topic.clone() });
        match receipt {
            PublishReceipt::Accepted { deliver_at, envelope } => {
                self.sched.schedule_at(deliver_at, SimEvent::Deliver(envelope)).expect("delivery is in the future");
            }
            PublishReceipt::Dropped => self.log(TraceKind::Dropped { topic }),
        }
    }

    fn finish_call(&mut self, request_id: u64, call: PendingCall, kind: OutcomeKind, body: Option<String>) {
        let now = self.now();
        let latency = now.since(call.issued_at);
        self.client.complete_call(kind, now, latency, body);
        self.cycles[call.cycle as usize].add(kind);
        if kind == OutcomeKind::Success {
            if let Some(&start) = self.awaiting_first_call.get(&call.instance_id) {
                if call.issued_at >= start {
                    self.awaiting_first_call.remove(&call.instance_id);
                    let rec = call.issued_at.since(start);
                    self.quickest_recovery = Some(self.quickest_recovery.map_or(rec, |q| q.min(rec)));
                }
            }
        }
        self.log(TraceKind::Outcome {
            request_id,
            cycle: call.cycle,
            rover_id: call.command.rover_id,
            kind,
            instance_id: Some(call.instance_id),
            issued_at_ms: call.issued_at,
            latency_ms: latency,
        });
        self.note_breaker();
    }

    fn deliver(&mut self, envelope: Envelope) -> Result<(), HarnessError> {
        let topic = envelope.topic.to_string();
        let Some(recipients) = self.broker.deliver(&envelope) else {
            self.log(TraceKind::Dropped { topic });
            return Ok(());
        };
        self.log(TraceKind::Delivered { topic });
        for who in recipients {
            if let Subscriber::Rover(rover_id) = who {
                let command: CommandMessage = serde_json::from_slice(&envelope.payload).map_err(FleetError::from)?;
                let (result, _) = self.fleet.rover_apply(&rover_id, &command)?;
                let applied = result == crate::fleet::ApplyResult::Applied;
                self.log(TraceKind::CommandApplied { command, applied });
            }
        }
        Ok(())
    }

    fn telemetry_tick(&mut self) -> Result<(), HarnessError> {
        let now = self.now();
        let rovers: Vec<String> = self.fleet.ids().map(str::to_owned).collect();
        for id in rovers {
            if let Some((_, receipt)) = self.fleet.rover_emit_telemetry(&id, &mut self.broker, &mut self.telemetry_rng, now)? {
                self.after_publish(Topic::Telemetry(id).to_string(), receipt);
            }
        }
        let cycle = self.script.cycle_ms;
        if now.plus(cycle) < self.end {
            self.sched.schedule_in(cycle, SimEvent::TelemetryTick);
        }
        Ok(())
    }

    /// Runs the script to its end and assembles the report from the live
    /// module counters.
    pub fn run(mut self) -> Result<RunOutput, HarnessError> {
        self.boot()?;
        while let Some(ev) = self.sched.pop_due(self.end) {
            self.dispatch(ev.action)?;
        }
        self.sched.advance_to(self.end).expect("clock never passes the end");
        self.log(TraceKind::RunFinished);
        Ok(self.finish())
    }

    fn uptime(&self) -> (BTreeMap<usize, f64>, BTreeMap<String, f64>) {
        let end = self.end;
        let spans: Vec<(SimInstant, SimInstant)> = self
            .intervals
            .values()
            .flatten()
            .map(|&(s, e)| (s, e.unwrap_or(end)))
            .collect();
        let mut cuts: BTreeSet<SimInstant> = spans.iter().flat_map(|&(s, e)| [s, e]).collect();
        cuts.insert(SimInstant::ZERO);
        cuts.insert(end);
        let cuts: Vec<SimInstant> = cuts.into_iter().filter(|&c| c <= end).collect();
        let mut hist_ms: BTreeMap<usize, u64> = (0..=self.backservers.len()).map(|n| (n, 0)).collect();
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let up = spans.iter().filter(|&&(s, e)| s <= a && b <= e && s < e).count();
            *hist_ms.entry(up).or_insert(0) += b.since(a);
        }
        let to_min = |ms: u64| ms as f64 / 60_000.0;
        let hist = hist_ms.into_iter().map(|(n, ms)| (n, to_min(ms))).collect();
        let per = self
            .backservers
            .keys()
            .map(|id| {
                let ms: u64 = self
                    .intervals
                    .get(id)
                    .map(|v| v.iter().map(|&(s, e)| e.unwrap_or(end).since(s)).sum())
                    .unwrap_or(0);
                (id.clone(), to_min(ms))
            })
            .collect();
        (hist, per)
    }

    fn finish(self) -> RunOutput {
        let (uptime_histogram, instance_uptime_min) = self.uptime();
        let tallies: Tallies = self.client.breaker().tallies();
        let report = MetricsReport {
            scenario: self.script.name.clone(),
            seed: self.cfg.seed,
            duration_min: self.script.duration_ms as f64 / 60_000.0,
            cycles: self.cycles.len() as u64,
            fleet_size: self.cfg.fleet_size,
            uptime_histogram,
            instance_uptime_min,
            per_instance_calls: self.backservers.iter().map(|(id, b)| (id.clone(), b.handled())).collect(),
            circuit_breaker: tallies,
            gateway_usage: self.gateway.usage().clone(),
            drops: self.broker.total().dropped,
            commands_delivered: self.broker.total_for("command/").delivered,
            telemetry_delivered: self.broker.total_for("telemetry/").delivered,
            quickest_recovery_ms: self.quickest_recovery,
        };
        RunOutput {
            report,
            cycles: self.cycles,
            trace: self.trace,
            registry: self.registry.snapshot(),
            rovers: self.fleet.rovers().cloned().collect(),
        }
    }
}

/// Validates `script` against `cfg` and runs it.
pub fn run(script: &ScenarioScript, cfg: &SimConfig) -> Result<RunOutput, HarnessError> {
    Simulation::new(script.clone(), cfg.clone())?.run()
}
