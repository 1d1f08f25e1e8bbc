//! Simulated over-the-air control of a rover fleet through a small
//! microservice stack: service registry, client-side round-robin balancing,
//! a circuit breaker, an API gateway with a config server, and a pub/sub
//! broker in front of the rovers. Everything runs on one virtual clock.

pub mod balancer;
pub mod breaker;
pub mod fleet;
pub mod gateway;
pub mod harness;
pub mod registry;
pub mod services;
pub mod simtime;

pub use balancer::{BalancerConfig, NoInstanceAvailable, RefreshResult, RoundRobinBalancer, ServerEntry};
pub use breaker::{
    BreakerConfig, BreakerMode, CallOutcome, CircuitBreaker, Decision, Fallback, OutcomeKind, Tallies, UNAVAILABLE,
};
pub use fleet::{
    Broker, CommandMessage, Direction, Envelope, Fleet, FleetError, PublishReceipt, RoverState, Subscriber,
    TelemetryMessage, Topic,
};
pub use gateway::{ConfigChange, ConfigError, ConfigServer, Gateway, RouteError};
pub use harness::{fold_report, run, HarnessError, MetricsReport, RunOutput, ScenarioScript, SimConfig, Trace};
pub use registry::{InstanceRecord, InstanceSource, InstanceStatus, Registry, RegistryConfig, RegistryError};
pub use services::{BackserverInstance, ClientService, StopMode};
pub use simtime::{Scheduler, SimInstant};
