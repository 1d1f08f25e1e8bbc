//! Edge router and configuration server.
//!
//! The [`Gateway`] is the single ingress: every request names a service id and
//! is resolved through that service's balancer. [`ConfigServer`] holds
//! per-service properties that can be changed while services keep running.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::balancer::{NoInstanceAvailable, RefreshResult, RoundRobinBalancer, ServerEntry};
use crate::registry::InstanceSource;
use crate::simtime::SimInstant;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("no route for service {0:?}")]
    NotRouted(String),
    #[error(transparent)]
    NoInstance(#[from] NoInstanceAvailable),
}

#[derive(Debug, Default)]
pub struct Gateway {
    routes: BTreeMap<String, RoundRobinBalancer>,
    usage: BTreeMap<String, u64>,
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds (or replaces) the route for the balancer's source service.
    pub fn add_route(&mut self, balancer: RoundRobinBalancer) {
        let id = balancer.config().source_service_id.clone();
        self.usage.entry(id.clone()).or_insert(0);
        self.routes.insert(id, balancer);
    }

    /// Resolves a target instance for `service_id`. Usage is counted for every
    /// call on a known route, whatever the outcome.
    pub fn route(&mut self, service_id: &str) -> Result<ServerEntry, RouteError> {
        let balancer = self
            .routes
            .get_mut(service_id)
            .ok_or_else(|| RouteError::NotRouted(service_id.to_owned()))?;
        *self.usage.entry(service_id.to_owned()).or_insert(0) += 1;
        Ok(balancer.choose()?)
    }

    pub fn balancer(&self, service_id: &str) -> Option<&RoundRobinBalancer> {
        self.routes.get(service_id)
    }

    pub fn balancer_mut(&mut self, service_id: &str) -> Option<&mut RoundRobinBalancer> {
        self.routes.get_mut(service_id)
    }

    pub fn refresh_all(&mut self, source: &dyn InstanceSource, now: SimInstant) -> Vec<(String, RefreshResult)> {
        self.routes
            .iter_mut()
            .map(|(id, b)| (id.clone(), b.refresh(source, now)))
            .collect()
    }

    pub fn usage(&self) -> &BTreeMap<String, u64> {
        &self.usage
    }

    pub fn total_usage(&self) -> u64 {
        self.usage.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    pub service_id: String,
    pub key: String,
    pub value: String,
    pub revision: u64,
}

/// A change to deliver to a subscribed service.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigChange {
    pub service_id: String,
    pub key: String,
    pub value: String,
    pub revision: u64,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("no config value for {service_id}.{key}")]
    NotFound { service_id: String, key: String },
    #[error("config key {0:?} must have the form service_id.key")]
    MalformedKey(String),
    #[error("reading boot config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing boot config: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Default)]
pub struct ConfigServer {
    entries: BTreeMap<(String, String), ConfigEntry>,
    subscribers: BTreeSet<String>,
}

impl ConfigServer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a server from a JSON object mapping `"service_id.key"` to a string value.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let map: BTreeMap<String, String> = serde_json::from_str(text)?;
        let mut server = ConfigServer::new();
        for (full_key, value) in map {
            let (service_id, key) = full_key
                .split_once('.')
                .filter(|(s, k)| !s.is_empty() && !k.is_empty())
                .ok_or_else(|| ConfigError::MalformedKey(full_key.clone()))?;
            server.set(service_id, key, &value);
        }
        Ok(server)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, service_id: &str, key: &str) -> Result<&ConfigEntry, ConfigError> {
        self.entries
            .get(&(service_id.to_owned(), key.to_owned()))
            .ok_or_else(|| ConfigError::NotFound { service_id: service_id.to_owned(), key: key.to_owned() })
    }

    pub fn subscribe(&mut self, service_id: &str) {
        self.subscribers.insert(service_id.to_owned());
    }

    /// Stores `value` under a new revision, even if unchanged. Returns the
    /// notification for the owning service if it is subscribed.
    pub fn set(&mut self, service_id: &str, key: &str, value: &str) -> (u64, Option<ConfigChange>) {
        let entry = self
            .entries
            .entry((service_id.to_owned(), key.to_owned()))
            .or_insert_with(|| ConfigEntry {
                service_id: service_id.to_owned(),
                key: key.to_owned(),
                value: String::new(),
                revision: 0,
            });
        entry.revision += 1;
        entry.value = value.to_owned();
        let revision = entry.revision;
        let change = self.subscribers.contains(service_id).then(|| ConfigChange {
            service_id: service_id.to_owned(),
            key: key.to_owned(),
            value: value.to_owned(),
            revision,
        });
        (revision, change)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ConfigEntry> {
        self.entries.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balancer::BalancerConfig;
    use crate::registry::{InstanceRecord, Registry, RegistryConfig};

    fn gateway(n: usize) -> Gateway {
        let mut reg = Registry::new(RegistryConfig::default()).unwrap();
        for i in 0..n {
            let rec = InstanceRecord::new("backserver", &format!("b{i}"), &format!("h:{}", 8000 + i), "v1");
            reg.register(rec, SimInstant::ZERO).unwrap();
        }
        let mut gw = Gateway::new();
        gw.add_route(RoundRobinBalancer::new(BalancerConfig::new("backserver")));
        gw.refresh_all(&reg, SimInstant::ZERO);
        gw
    }

    #[test]
    fn routes_known_service() {
        let mut gw = gateway(2);
        assert_eq!(gw.route("backserver").unwrap().instance_id, "b0");
        assert_eq!(gw.usage()["backserver"], 1);
    }

    #[test]
    fn unknown_service_not_routed() {
        let mut gw = gateway(2);
        assert_eq!(gw.route("unknown"), Err(RouteError::NotRouted("unknown".into())));
        assert_eq!(gw.total_usage(), 0);
    }

    #[test]
    fn usage_counts_failed_routes_too() {
        let mut gw = gateway(0);
        assert_eq!(gw.route("backserver"), Err(RouteError::NoInstance(NoInstanceAvailable)));
        assert_eq!(gw.usage()["backserver"], 1);
    }

    #[test]
    fn usage_counter_oracle() {
        // Requests whose index ends in 0, 4, 5 or 9 arrive while every
        // instance is marked unhealthy.
        let injected_fail = |i: usize| matches!(i % 10, 0 | 4 | 5 | 9);
        let mut reg = Registry::new(RegistryConfig::default()).unwrap();
        for id in ["b0", "b1", "b2"] {
            reg.register(InstanceRecord::new("backserver", id, "h:8000", "v1"), SimInstant::ZERO).unwrap();
        }
        let mut gw = gateway(3);
        let mut failed = 0;
        for i in 0..100 {
            if injected_fail(i) {
                for id in ["b0", "b1", "b2"] {
                    gw.balancer_mut("backserver").unwrap().report_unhealthy(id);
                }
                failed += gw.route("backserver").is_err() as usize;
                gw.refresh_all(&reg, SimInstant::ZERO);
            } else {
                gw.route("backserver").unwrap();
            }
        }
        assert_eq!((0..100).filter(|&i| injected_fail(i)).count(), 40);
        assert_eq!(failed, 40);
        assert_eq!(gw.usage()["backserver"], 100);
    }

    #[test]
    fn set_then_get_revisions() {
        let mut cfg = ConfigServer::new();
        assert!(matches!(cfg.get("client", "cycle_ms"), Err(ConfigError::NotFound { .. })));
        assert_eq!(cfg.set("client", "cycle_ms", "60000").0, 1);
        let e = cfg.get("client", "cycle_ms").unwrap();
        assert_eq!((e.value.as_str(), e.revision), ("60000", 1));
        assert_eq!(cfg.set("client", "cycle_ms", "60000").0, 2);
        assert_eq!(cfg.get("client", "cycle_ms").unwrap().revision, 2);
    }

    #[test]
    fn only_subscribers_get_notified() {
        let mut cfg = ConfigServer::new();
        assert!(cfg.set("client", "k", "v").1.is_none());
        cfg.subscribe("client");
        let (_, change) = cfg.set("client", "k", "w");
        assert_eq!(change.unwrap().revision, 2);
        assert!(cfg.set("backserver", "k", "v").1.is_none());
    }

    #[test]
    fn revisions_are_gapless() {
        let mut cfg = ConfigServer::new();
        let revs: Vec<u64> = (0..10).map(|i| cfg.set("client", "x", &i.to_string()).0).collect();
        assert_eq!(revs, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn boot_file_splits_on_first_dot() {
        let cfg = ConfigServer::from_json(r#"{"client.next_move_direction": "LEFT", "backserver.server.port": "8081"}"#).unwrap();
        assert_eq!(cfg.get("client", "next_move_direction").unwrap().value, "LEFT");
        assert_eq!(cfg.get("backserver", "server.port").unwrap().value, "8081");
        assert!(matches!(ConfigServer::from_json(r#"{"nodot": "x"}"#), Err(ConfigError::MalformedKey(_))));
        assert!(matches!(ConfigServer::from_json("[1]"), Err(ConfigError::Parse(_))));
    }
}
