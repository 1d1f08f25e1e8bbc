//! Service registry with heartbeat leases.
//!
//! Instances register an address and renew a lease by heartbeating. A record
//! whose last heartbeat is older than `heartbeat_interval * eviction_multiplier`
//! is treated as gone by [`Registry::fetch_instances`] and removed by the next
//! [`Registry::sweep_expired`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simtime::SimInstant;

/// Name the registry itself runs under. It never lists itself.
pub const REGISTRY_SERVICE_ID: &str = "registry";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InstanceStatus {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub service_id: String,
    pub instance_id: String,
    pub address: String,
    pub status: InstanceStatus,
    #[serde(rename = "registered_at_ms")]
    pub registered_at: SimInstant,
    #[serde(rename = "last_heartbeat_ms")]
    pub last_heartbeat: SimInstant,
    pub version: String,
}

impl InstanceRecord {
    /// A fresh record; timestamps are overwritten on registration.
    pub fn new(service_id: &str, instance_id: &str, address: &str, version: &str) -> Self {
        InstanceRecord {
            service_id: service_id.to_owned(),
            instance_id: instance_id.to_owned(),
            address: address.to_owned(),
            status: InstanceStatus::Up,
            registered_at: SimInstant::ZERO,
            last_heartbeat: SimInstant::ZERO,
            version: version.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegistryConfig {
    pub heartbeat_interval_ms: u64,
    pub eviction_multiplier: u32,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig { heartbeat_interval_ms: 2_000, eviction_multiplier: 3 }
    }
}

impl RegistryConfig {
    pub fn lease_ms(&self) -> u64 {
        self.heartbeat_interval_ms * u64::from(self.eviction_multiplier)
    }

    /// Longest time a silent instance can remain listed:
    /// `heartbeat_interval * (eviction_multiplier + 1)`.
    pub fn staleness_bound_ms(&self) -> u64 {
        self.heartbeat_interval_ms * (u64::from(self.eviction_multiplier) + 1)
    }

    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.heartbeat_interval_ms == 0 || self.eviction_multiplier == 0 {
            return Err(RegistryError::InvalidConfig);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("malformed address {0:?}, expected host:port")]
    MalformedAddress(String),
    #[error("invalid service id {0:?}")]
    InvalidServiceId(String),
    #[error("empty instance id")]
    EmptyInstanceId,
    #[error("the registry does not register itself")]
    SelfRegistration,
    #[error("instance {service_id}/{instance_id} is not registered")]
    NotRegistered { service_id: String, instance_id: String },
    #[error("heartbeat interval and eviction multiplier must be positive")]
    InvalidConfig,
}

/// Raised by an [`InstanceSource`] that cannot currently be reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("registry unreachable")]
pub struct RegistryUnavailable;

/// Anything a discovery client can fetch instance lists from.
pub trait InstanceSource {
    fn fetch(&self, service_id: &str, now: SimInstant)
        -> Result<Vec<InstanceRecord>, RegistryUnavailable>;
}

fn valid_address(address: &str) -> bool {
    match address.rsplit_once(':') {
        Some((host, port)) => {
            !host.is_empty()
                && !host.contains(char::is_whitespace)
                && port.parse::<u16>().map(|p| p > 0).unwrap_or(false)
        }
        None => false,
    }
}

fn valid_service_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-' || c == '_')
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    config: RegistryConfig,
    records: BTreeMap<(String, String), InstanceRecord>,
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Result<Self, RegistryError> {
        config.validate()?;
        Ok(Registry { config, records: BTreeMap::new() })
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    /// Upserts `record` with status UP and a fresh lease.
    ///
    /// Re-registering an existing instance keeps its original `registered_at`
    /// unless the record was evicted in between.
    pub fn register(&mut self, mut record: InstanceRecord, now: SimInstant) -> Result<(), RegistryError> {
        if record.service_id == REGISTRY_SERVICE_ID {
            return Err(RegistryError::SelfRegistration);
        }
        if !valid_service_id(&record.service_id) {
            return Err(RegistryError::InvalidServiceId(record.service_id));
        }
        if record.instance_id.is_empty() {
            return Err(RegistryError::EmptyInstanceId);
        }
        if !valid_address(&record.address) {
            return Err(RegistryError::MalformedAddress(record.address));
        }
        let key = (record.service_id.clone(), record.instance_id.clone());
        record.registered_at = self.records.get(&key).map_or(now, |r| r.registered_at);
        record.last_heartbeat = now;
        record.status = InstanceStatus::Up;
        self.records.insert(key, record);
        Ok(())
    }

    pub fn heartbeat(&mut self, service_id: &str, instance_id: &str, now: SimInstant) -> Result<(), RegistryError> {
        match self.records.get_mut(&(service_id.to_owned(), instance_id.to_owned())) {
            Some(rec) => {
                rec.last_heartbeat = now;
                rec.status = InstanceStatus::Up;
                Ok(())
            }
            None => Err(RegistryError::NotRegistered {
                service_id: service_id.to_owned(),
                instance_id: instance_id.to_owned(),
            }),
        }
    }

    /// Removes the record. Unknown instances are a no-op; returns whether anything was removed.
    pub fn deregister(&mut self, service_id: &str, instance_id: &str) -> bool {
        self.records
            .remove(&(service_id.to_owned(), instance_id.to_owned()))
            .is_some()
    }

    /// Marks an instance DOWN without removing it. DOWN records are not served.
    pub fn mark_down(&mut self, service_id: &str, instance_id: &str) -> bool {
        match self.records.get_mut(&(service_id.to_owned(), instance_id.to_owned())) {
            Some(rec) => {
                rec.status = InstanceStatus::Down;
                true
            }
            None => false,
        }
    }

    fn expired(&self, rec: &InstanceRecord, now: SimInstant) -> bool {
        now.since(rec.last_heartbeat) > self.config.lease_ms()
    }

    /// UP instances of `service_id` with a live lease at `now`, ordered by instance id.
    pub fn fetch_instances(&self, service_id: &str, now: SimInstant) -> Vec<InstanceRecord> {
        self.records
            .values()
            .filter(|r| r.service_id == service_id)
            .filter(|r| r.status == InstanceStatus::Up && !self.expired(r, now))
            .cloned()
            .collect()
    }

    /// Evicts every record whose lease has expired; returns the evicted instance ids.
    pub fn sweep_expired(&mut self, now: SimInstant) -> Vec<String> {
        let stale: Vec<_> = self
            .records
            .iter()
            .filter(|(_, r)| self.expired(r, now))
            .map(|(k, _)| k.clone())
            .collect();
        stale
            .into_iter()
            .map(|k| {
                self.records.remove(&k);
                k.1
            })
            .collect()
    }

    pub fn get(&self, service_id: &str, instance_id: &str) -> Option<&InstanceRecord> {
        self.records.get(&(service_id.to_owned(), instance_id.to_owned()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Every record, ordered by (service_id, instance_id).
    pub fn snapshot(&self) -> Vec<InstanceRecord> {
        self.records.values().cloned().collect()
    }

    /// JSON array dump of all records.
    pub fn dump_json(&self) -> String {
        serde_json::to_string_pretty(&self.snapshot()).expect("records serialize")
    }
}

impl InstanceSource for Registry {
    fn fetch(&self, service_id: &str, now: SimInstant) -> Result<Vec<InstanceRecord>, RegistryUnavailable> {
        Ok(self.fetch_instances(service_id, now))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(ms: u64) -> SimInstant {
        SimInstant::from_millis(ms)
    }

    fn rec(service: &str, id: &str) -> InstanceRecord {
        InstanceRecord::new(service, id, "10.0.0.1:8080", "v1")
    }

    fn reg() -> Registry {
        Registry::new(RegistryConfig::default()).unwrap()
    }

    /// Independent lease oracle: is an instance last seen at `hb` still listed
    /// by a sweep at `sweep`?
    fn lease_alive(hb: u64, sweep: u64, interval: u64, mult: u64) -> bool {
        // Count whole lease periods by enumeration instead of arithmetic.
        let mut deadline = hb;
        for _ in 0..mult {
            deadline += interval;
        }
        sweep <= deadline
    }

    #[test]
    fn four_backservers_and_one_client() {
        let mut r = reg();
        for i in 1..=4 {
            r.register(rec("backserver", &format!("backserver-{i}")), t(0)).unwrap();
        }
        r.register(rec("client", "client-1"), t(0)).unwrap();
        assert_eq!(r.fetch_instances("backserver", t(0)).len(), 4);
        assert_eq!(r.fetch_instances("client", t(0)).len(), 1);
    }

    #[test]
    fn register_is_idempotent_upsert() {
        let mut r = reg();
        r.register(rec("backserver", "a"), t(0)).unwrap();
        r.register(rec("backserver", "a"), t(500)).unwrap();
        assert_eq!(r.len(), 1);
        let got = r.get("backserver", "a").unwrap();
        assert_eq!(got.registered_at, t(0));
        assert_eq!(got.last_heartbeat, t(500));
    }

    #[test]
    fn validation_leaves_registry_unchanged() {
        let mut r = reg();
        assert!(matches!(r.register(rec("", "a"), t(0)), Err(RegistryError::InvalidServiceId(_))));
        let bad = InstanceRecord::new("backserver", "a", "no-port", "v1");
        assert!(matches!(r.register(bad, t(0)), Err(RegistryError::MalformedAddress(_))));
        let bad = InstanceRecord::new("backserver", "a", "host:99999", "v1");
        assert!(r.register(bad, t(0)).is_err());
        assert_eq!(r.register(rec(REGISTRY_SERVICE_ID, "self"), t(0)), Err(RegistryError::SelfRegistration));
        assert!(r.is_empty());
    }

    #[test]
    fn lease_boundary_matches_oracle() {
        let cfg = RegistryConfig::default();
        for hb in [0u64, 2_000, 7_777] {
            for offset in (0..=10_000).step_by(1) {
                let mut r = reg();
                r.register(rec("backserver", "a"), t(hb)).unwrap();
                let evicted = r.sweep_expired(t(hb + offset));
                let expect_alive = lease_alive(hb, hb + offset, cfg.heartbeat_interval_ms, cfg.eviction_multiplier as u64);
                assert_eq!(evicted.is_empty(), expect_alive, "hb={hb} offset={offset}");
                assert_eq!(r.fetch_instances("backserver", t(hb + offset)).len(), expect_alive as usize);
            }
        }
        let mut r = reg();
        r.register(rec("backserver", "a"), t(0)).unwrap();
        assert!(r.sweep_expired(t(5_999)).is_empty());
        assert!(r.sweep_expired(t(6_000)).is_empty());
        assert_eq!(r.sweep_expired(t(6_001)), vec!["a".to_string()]);
    }

    #[test]
    fn heartbeat_renews_and_unknown_is_signalled() {
        let mut r = reg();
        r.register(rec("backserver", "a"), t(0)).unwrap();
        r.heartbeat("backserver", "a", t(5_000)).unwrap();
        assert!(r.sweep_expired(t(10_999)).is_empty());
        assert!(matches!(
            r.heartbeat("backserver", "zzz", t(0)),
            Err(RegistryError::NotRegistered { .. })
        ));
    }

    #[test]
    fn heartbeat_restores_down() {
        let mut r = reg();
        r.register(rec("backserver", "a"), t(0)).unwrap();
        assert!(r.mark_down("backserver", "a"));
        assert!(r.fetch_instances("backserver", t(0)).is_empty());
        r.heartbeat("backserver", "a", t(1)).unwrap();
        assert_eq!(r.fetch_instances("backserver", t(1)).len(), 1);
    }

    #[test]
    fn deregister_is_idempotent() {
        let mut r = reg();
        r.register(rec("backserver", "a"), t(0)).unwrap();
        assert!(r.deregister("backserver", "a"));
        assert!(!r.deregister("backserver", "a"));
        assert!(r.fetch_instances("backserver", t(0)).is_empty());
    }

    #[test]
    fn deregister_one_of_four() {
        let mut r = reg();
        for id in ["d", "b", "c", "a"] {
            r.register(rec("backserver", id), t(0)).unwrap();
        }
        r.deregister("backserver", "c");
        let ids: Vec<_> = r.fetch_instances("backserver", t(0)).into_iter().map(|r| r.instance_id).collect();
        assert_eq!(ids, ["a", "b", "d"]);
    }

    #[test]
    fn two_of_four_evicted() {
        let mut r = reg();
        for id in ["a", "b", "c", "d"] {
            r.register(rec("backserver", id), t(0)).unwrap();
        }
        for now in (2_000..=8_000).step_by(2_000) {
            r.heartbeat("backserver", "a", t(now)).unwrap();
            r.heartbeat("backserver", "c", t(now)).unwrap();
        }
        let mut evicted = r.sweep_expired(t(8_000));
        evicted.sort();
        assert_eq!(evicted, ["b", "d"]);
        assert!(r.sweep_expired(t(8_000)).is_empty());
        assert_eq!(r.fetch_instances("backserver", t(8_000)).len(), 2);
    }

    #[test]
    fn unknown_service_is_empty() {
        assert!(reg().fetch_instances("nothing", t(0)).is_empty());
        assert!(reg().sweep_expired(t(0)).is_empty());
    }

    #[test]
    fn dump_uses_wire_field_names() {
        let mut r = reg();
        r.register(rec("backserver", "a"), t(1_234)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.dump_json()).unwrap();
        let obj = v[0].as_object().unwrap();
        let keys: Vec<_> = obj.keys().map(String::as_str).collect();
        for k in ["service_id", "instance_id", "address", "status", "registered_at_ms", "last_heartbeat_ms", "version"] {
            assert!(keys.contains(&k), "missing {k}");
        }
        assert_eq!(obj["status"], "UP");
        assert_eq!(obj["registered_at_ms"], 1_234);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = RegistryConfig { heartbeat_interval_ms: 0, eviction_multiplier: 3 };
        assert!(Registry::new(cfg).is_err());
        let cfg = RegistryConfig { heartbeat_interval_ms: 2_000, eviction_multiplier: 0 };
        assert!(Registry::new(cfg).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn visible_iff_within_lease(beats in proptest::collection::vec(0u64..5_000, 1..20), probe in 0u64..10_000) {
                let mut r = reg();
                let mut last = 0;
                r.register(rec("backserver", "a"), t(0)).unwrap();
                for gap in beats {
                    last += gap;
                    r.heartbeat("backserver", "a", t(last)).unwrap();
                }
                let now = last + probe;
                let visible = !r.fetch_instances("backserver", t(now)).is_empty();
                prop_assert_eq!(visible, now - last <= 6_000);
                let evicted = r.sweep_expired(t(now));
                prop_assert_eq!(evicted.is_empty(), visible);
            }
        }
    }
}
