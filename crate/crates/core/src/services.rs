//! The two application services: the Client that drives one command per rover
//! per cycle, and the stateless Backserver that forwards commands to the broker.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balancer::ServerEntry;
use crate::breaker::{CallOutcome, CircuitBreaker, Decision, Fallback, OutcomeKind};
use crate::fleet::{encode, Broker, CommandMessage, Direction, FleetError, PublishReceipt, Topic};
use crate::gateway::{ConfigChange, ConfigServer, Gateway, RouteError};
use crate::registry::{InstanceRecord, Registry, RegistryError};
use crate::simtime::SimInstant;

pub const CLIENT_SERVICE_ID: &str = "client";
pub const BACKSERVER_SERVICE_ID: &str = "backserver";

pub const KEY_CYCLE_MS: &str = "cycle_ms";
pub const KEY_DIRECTION: &str = "next_move_direction";
pub const KEY_SPEED: &str = "speed_control";

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("instance {0} is not running")]
    NotRunning(String),
    #[error("bad value {value:?} for config key {key}")]
    BadConfigValue { key: String, value: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientConfig {
    pub cycle_ms: u64,
    pub fleet_size: usize,
    pub commands_per_cycle_per_rover: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig { cycle_ms: 60_000, fleet_size: 40, commands_per_cycle_per_rover: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// Stop heartbeating without deregistering; the lease expires.
    Crash,
    /// Deregister before going down.
    Graceful,
}

/// How a call attempt left the client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallStart {
    /// Answered by the breaker's fallback; already recorded.
    ShortCircuited(Fallback),
    /// No instance could be chosen; recorded as a Failure.
    NoInstance,
    /// On the wire to `target`; the outcome is recorded later.
    Dispatched(ServerEntry),
}

#[derive(Debug, Clone)]
struct RoverPlan {
    rotation_offset: usize,
    speed: u8,
    next_sequence: u64,
}

/// The Client service: builds commands and calls the Backservers through the
/// gateway behind a single circuit breaker.
#[derive(Debug)]
pub struct ClientService {
    pub instance_id: String,
    pub address: String,
    config: ClientConfig,
    breaker: CircuitBreaker,
    plans: BTreeMap<String, RoverPlan>,
    direction_override: Option<Direction>,
    speed_override: Option<u8>,
}

impl ClientService {
    pub fn new<R: Rng>(
        instance_id: &str,
        address: &str,
        config: ClientConfig,
        breaker: CircuitBreaker,
        rover_ids: impl IntoIterator<Item = String>,
        rng: &mut R,
    ) -> Self {
        let plans = rover_ids
            .into_iter()
            .map(|id| {
                let plan = RoverPlan {
                    rotation_offset: rng.gen_range(0..Direction::ROTATION.len()),
                    speed: rng.gen_range(20..=80),
                    next_sequence: 1,
                };
                (id, plan)
            })
            .collect();
        ClientService {
            instance_id: instance_id.to_owned(),
            address: address.to_owned(),
            config,
            breaker,
            plans,
            direction_override: None,
            speed_override: None,
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn breaker(&self) -> &CircuitBreaker {
        &self.breaker
    }

    pub fn record_for_registry(&self) -> InstanceRecord {
        InstanceRecord::new(CLIENT_SERVICE_ID, &self.instance_id, &self.address, "v1")
    }

    pub fn rover_ids(&self) -> impl Iterator<Item = &str> {
        self.plans.keys().map(String::as_str)
    }

    /// Reads every `client.*` key already present on the config server.
    pub fn load_config(&mut self, server: &ConfigServer) -> Result<(), ServiceError> {
        for key in [KEY_CYCLE_MS, KEY_DIRECTION, KEY_SPEED] {
            if let Ok(entry) = server.get(CLIENT_SERVICE_ID, key) {
                self.set_property(key, &entry.value)?;
            }
        }
        Ok(())
    }

    /// Applies a pushed configuration change in place; the service keeps running.
    pub fn apply_config(&mut self, change: &ConfigChange) -> Result<(), ServiceError> {
        self.set_property(&change.key, &change.value)
    }

    fn set_property(&mut self, key: &str, value: &str) -> Result<(), ServiceError> {
        let bad = || ServiceError::BadConfigValue { key: key.to_owned(), value: value.to_owned() };
        match key {
            KEY_CYCLE_MS => {
                let ms: u64 = value.trim().parse().map_err(|_| bad())?;
                if ms == 0 {
                    return Err(bad());
                }
                self.config.cycle_ms = ms;
            }
            KEY_DIRECTION => {
                self.direction_override = if value.trim().is_empty() || value.eq_ignore_ascii_case("ROTATE") {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad())?)
                };
            }
            KEY_SPEED => {
                let speed: u8 = value.trim().parse().map_err(|_| bad())?;
                if speed > 100 {
                    return Err(bad());
                }
                self.speed_override = Some(speed);
            }
            // unknown keys belong to someone else's feature
            _ => {}
        }
        Ok(())
    }

    /// Builds the next command for `rover_id`.
    pub fn next_command(&mut self, rover_id: &str, now: SimInstant) -> CommandMessage {
        let plan = self.plans.get_mut(rover_id).expect("rover belongs to the fleet");
        let sequence = plan.next_sequence;
        plan.next_sequence += 1;
        let rotated = Direction::ROTATION[(plan.rotation_offset + sequence as usize - 1) % Direction::ROTATION.len()];
        CommandMessage {
            rover_id: rover_id.to_owned(),
            speed_control: self.speed_override.unwrap_or(plan.speed),
            next_move_direction: self.direction_override.unwrap_or(rotated),
            sequence,
            sent_at: now,
        }
    }

    /// Runs the breaker check and resolves a target through the gateway.
    /// Short-circuits and routing failures are recorded immediately.
    pub fn begin_call(&mut self, gateway: &mut Gateway, now: SimInstant) -> (CallStart, Option<RouteError>) {
        match self.breaker.allow_request(now) {
            Decision::ShortCircuit(fallback) => {
                self.breaker.record(CallOutcome::short_circuited(now), None);
                (CallStart::ShortCircuited(fallback), None)
            }
            Decision::Proceed => match gateway.route(BACKSERVER_SERVICE_ID) {
                Ok(target) => (CallStart::Dispatched(target), None),
                Err(e) => {
                    self.breaker.record(CallOutcome::new(OutcomeKind::Failure, now, 0), None);
                    (CallStart::NoInstance, Some(e))
                }
            },
        }
    }

    /// Records the outcome of a dispatched call.
    pub fn complete_call(&mut self, kind: OutcomeKind, now: SimInstant, latency_ms: u64, response: Option<String>) {
        self.breaker.record(CallOutcome::new(kind, now, latency_ms), response);
    }
}

/// Reply to a forwarded command. Depends only on the command itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardReceipt {
    pub kind: OutcomeKind,
    pub body: String,
    pub publish: PublishReceipt,
}

pub fn response_body(cmd: &CommandMessage) -> String {
    format!("ACK {}#{} {} {}", cmd.rover_id, cmd.sequence, cmd.next_move_direction, cmd.speed_control)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackserverInstance {
    pub instance_id: String,
    pub address: String,
    pub running: bool,
    pub version: String,
    starts: u32,
    handled: u64,
}

impl BackserverInstance {
    pub fn new(instance_id: &str, address: &str) -> Self {
        BackserverInstance {
            instance_id: instance_id.to_owned(),
            address: address.to_owned(),
            running: false,
            version: "v0".to_owned(),
            starts: 0,
            handled: 0,
        }
    }

    /// Number of times this instance has been started; bumps on every restart.
    pub fn generation(&self) -> u32 {
        self.starts
    }

    pub fn handled(&self) -> u64 {
        self.handled
    }

    /// Registers with the registry and marks the instance running. Each start
    /// deploys a new version tag. Starting a running instance is a no-op.
    pub fn start(&mut self, registry: &mut Registry, now: SimInstant) -> Result<bool, ServiceError> {
        if self.running {
            return Ok(false);
        }
        self.starts += 1;
        self.version = format!("v{}", self.starts);
        registry.register(InstanceRecord::new(BACKSERVER_SERVICE_ID, &self.instance_id, &self.address, &self.version), now)?;
        self.running = true;
        Ok(true)
    }

    /// Stops the instance; graceful mode also deregisters. Stopping a stopped
    /// instance is a no-op.
    pub fn stop(&mut self, registry: &mut Registry, mode: StopMode) -> bool {
        if !self.running {
            return false;
        }
        self.running = false;
        if mode == StopMode::Graceful {
            registry.deregister(BACKSERVER_SERVICE_ID, &self.instance_id);
        }
        true
    }

    /// Renews the lease; re-registers if the registry has forgotten us.
    pub fn heartbeat(&self, registry: &mut Registry, now: SimInstant) -> Result<bool, ServiceError> {
        if !self.running {
            return Err(ServiceError::NotRunning(self.instance_id.clone()));
        }
        match registry.heartbeat(BACKSERVER_SERVICE_ID, &self.instance_id, now) {
            Ok(()) => Ok(false),
            Err(RegistryError::NotRegistered { .. }) => {
                let rec = InstanceRecord::new(BACKSERVER_SERVICE_ID, &self.instance_id, &self.address, &self.version);
                registry.register(rec, now)?;
                Ok(true)
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Forwards `cmd` to its rover's command topic.
    pub fn handle(&mut self, cmd: &CommandMessage, broker: &mut Broker, now: SimInstant) -> Result<ForwardReceipt, ServiceError> {
        if !self.running {
            return Err(ServiceError::NotRunning(self.instance_id.clone()));
        }
        let topic = Topic::Command(cmd.rover_id.clone()).to_string();
        let publish = broker.publish(&topic, encode(cmd), now)?;
        self.handled += 1;
        let kind = match publish {
            PublishReceipt::Accepted { .. } => OutcomeKind::Success,
            PublishReceipt::Dropped => OutcomeKind::Failure,
        };
        Ok(ForwardReceipt { kind, body: response_body(cmd), publish })
    }
}
