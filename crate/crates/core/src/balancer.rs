//! Client-side round-robin load balancer over a periodically refreshed server list.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::InstanceSource;
use crate::simtime::SimInstant;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancerConfig {
    pub refresh_interval_ms: u64,
    pub source_service_id: String,
}

impl BalancerConfig {
    pub fn new(source_service_id: &str) -> Self {
        BalancerConfig { refresh_interval_ms: 2_000, source_service_id: source_service_id.to_owned() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServerEntry {
    pub instance_id: String,
    pub address: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("no instance available")]
pub struct NoInstanceAvailable;

/// What a refresh did to the server list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RefreshResult {
    /// Membership changed; cursor reset to 0.
    Changed,
    /// Same members as before; cursor preserved.
    Unchanged,
    /// Source unreachable; previous list kept.
    Unreachable,
}

#[derive(Debug, Clone)]
pub struct RoundRobinBalancer {
    config: BalancerConfig,
    servers: Vec<ServerEntry>,
    cursor: usize,
    last_refresh: Option<SimInstant>,
    unhealthy: BTreeSet<String>,
}

impl RoundRobinBalancer {
    pub fn new(config: BalancerConfig) -> Self {
        RoundRobinBalancer { config, servers: Vec::new(), cursor: 0, last_refresh: None, unhealthy: BTreeSet::new() }
    }

    pub fn config(&self) -> &BalancerConfig {
        &self.config
    }

    pub fn servers(&self) -> &[ServerEntry] {
        &self.servers
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn last_refresh(&self) -> Option<SimInstant> {
        self.last_refresh
    }

    /// Ids of servers that `choose` can currently return, in rotation order.
    pub fn healthy(&self) -> Vec<&str> {
        self.servers
            .iter()
            .filter(|s| !self.unhealthy.contains(&s.instance_id))
            .map(|s| s.instance_id.as_str())
            .collect()
    }

    /// Replaces the server list with the source's current view. Clears every
    /// unhealthy mark.
    pub fn refresh(&mut self, source: &dyn InstanceSource, now: SimInstant) -> RefreshResult {
        let fetched = match source.fetch(&self.config.source_service_id, now) {
            Ok(list) => list,
            Err(_) => return RefreshResult::Unreachable,
        };
        let next: Vec<ServerEntry> = fetched
            .into_iter()
            .map(|r| ServerEntry { instance_id: r.instance_id, address: r.address })
            .collect();
        self.last_refresh = Some(now);
        self.unhealthy.clear();
        let same = next.len() == self.servers.len()
            && next.iter().zip(&self.servers).all(|(a, b)| a.instance_id == b.instance_id);
        self.servers = next;
        if same {
            RefreshResult::Unchanged
        } else {
            self.cursor = 0;
            RefreshResult::Changed
        }
    }

    /// Returns the next healthy server in rotation and advances the cursor past it.
    pub fn choose(&mut self) -> Result<ServerEntry, NoInstanceAvailable> {
        let n = self.servers.len();
        for step in 0..n {
            let idx = (self.cursor + step) % n;
            let entry = &self.servers[idx];
            if !self.unhealthy.contains(&entry.instance_id) {
                self.cursor = (idx + 1) % n;
                return Ok(entry.clone());
            }
        }
        Err(NoInstanceAvailable)
    }

    /// Skips `instance_id` until the next refresh. Unknown ids are ignored.
    /// Returns true if the healthy set shrank.
    pub fn report_unhealthy(&mut self, instance_id: &str) -> bool {
        if self.servers.iter().any(|s| s.instance_id == instance_id) {
            self.unhealthy.insert(instance_id.to_owned())
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{InstanceRecord, Registry, RegistryConfig, RegistryUnavailable};
    use std::collections::BTreeMap;

    struct Down;
    impl InstanceSource for Down {
        fn fetch(&self, _: &str, _: SimInstant) -> Result<Vec<InstanceRecord>, RegistryUnavailable> {
            Err(RegistryUnavailable)
        }
    }

    fn registry(ids: &[&str]) -> Registry {
        let mut r = Registry::new(RegistryConfig::default()).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let addr = format!("10.0.0.{}:8080", i + 1);
            r.register(InstanceRecord::new("backserver", id, &addr, "v1"), SimInstant::ZERO).unwrap();
        }
        r
    }

    fn balancer(ids: &[&str]) -> RoundRobinBalancer {
        let mut b = RoundRobinBalancer::new(BalancerConfig::new("backserver"));
        b.refresh(&registry(ids), SimInstant::ZERO);
        b
    }

    fn picks(b: &mut RoundRobinBalancer, n: usize) -> Vec<String> {
        (0..n).map(|_| b.choose().unwrap().instance_id).collect()
    }

    #[test]
    fn refresh_takes_registry_view() {
        let b = balancer(&["a", "b", "c"]);
        let ids: Vec<_> = b.servers().iter().map(|s| s.instance_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    #[test]
    fn eviction_resets_cursor() {
        let mut b = balancer(&["a", "b", "c"]);
        b.choose().unwrap();
        assert_eq!(b.cursor(), 1);
        assert_eq!(b.refresh(&registry(&["a", "c"]), SimInstant::from_millis(2_000)), RefreshResult::Changed);
        assert_eq!(b.cursor(), 0);
        assert_eq!(picks(&mut b, 2), ["a", "c"]);
    }

    #[test]
    fn unchanged_membership_keeps_cursor() {
        let mut b = balancer(&["a", "b", "c"]);
        b.choose().unwrap();
        assert_eq!(b.refresh(&registry(&["a", "b", "c"]), SimInstant::from_millis(2_000)), RefreshResult::Unchanged);
        assert_eq!(b.cursor(), 1);
    }

    #[test]
    fn unreachable_keeps_list() {
        let mut b = balancer(&["a", "b", "c"]);
        assert_eq!(b.refresh(&Down, SimInstant::from_millis(2_000)), RefreshResult::Unreachable);
        assert_eq!(b.servers().len(), 3);
        assert_eq!(b.last_refresh(), Some(SimInstant::ZERO));
    }

    #[test]
    fn round_robin_rotation() {
        let mut b = balancer(&["a", "b", "c"]);
        assert_eq!(picks(&mut b, 6), ["a", "b", "c", "a", "b", "c"]);
    }

    #[test]
    fn empty_list_is_no_instance() {
        let mut b = balancer(&[]);
        assert_eq!(b.choose(), Err(NoInstanceAvailable));
    }

    #[test]
    fn unhealthy_is_skipped() {
        let mut b = balancer(&["a", "b", "c"]);
        assert!(b.report_unhealthy("b"));
        assert_eq!(picks(&mut b, 4), ["a", "c", "a", "c"]);
        assert!(!b.report_unhealthy("nope"));
    }

    #[test]
    fn all_unhealthy_is_no_instance() {
        let mut b = balancer(&["a", "b"]);
        b.report_unhealthy("a");
        b.report_unhealthy("b");
        assert_eq!(b.choose(), Err(NoInstanceAvailable));
    }

    #[test]
    fn refresh_readmits_listed_instance() {
        let reg = registry(&["a", "b", "c"]);
        let mut b = balancer(&["a", "b", "c"]);
        b.report_unhealthy("b");
        assert_eq!(picks(&mut b, 2), ["a", "c"]);
        b.refresh(&reg, SimInstant::from_millis(2_000));
        let got = picks(&mut b, 3);
        assert!(got.contains(&"b".to_string()), "{got:?}");
    }

    #[test]
    fn four_way_counts_differ_by_at_most_one() {
        for n in 0..100 {
            let mut b = balancer(&["a", "b", "c", "d"]);
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for id in picks(&mut b, n) {
                *counts.entry(id).or_default() += 1;
            }
            let max = counts.values().copied().max().unwrap_or(0);
            let min = if counts.len() < 4 { 0 } else { counts.values().copied().min().unwrap() };
            assert!(max - min <= 1, "n={n} counts={counts:?}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn picks_stay_within_one(n in 1usize..8, rounds in 0usize..200, bad in proptest::collection::vec(any::<bool>(), 8)) {
                let ids: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
                let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
                let mut b = balancer(&refs);
                for (i, id) in ids.iter().enumerate() {
                    if bad[i] {
                        b.report_unhealthy(id);
                    }
                }
                let healthy: Vec<String> = b.healthy().into_iter().map(str::to_owned).collect();
                if healthy.is_empty() {
                    prop_assert!(b.choose().is_err());
                    return Ok(());
                }
                let mut count: BTreeMap<String, usize> = BTreeMap::new();
                for id in picks(&mut b, rounds) {
                    prop_assert!(healthy.contains(&id));
                    *count.entry(id).or_default() += 1;
                }
                let per: Vec<usize> = healthy.iter().map(|h| count.get(h).copied().unwrap_or(0)).collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
        }
    }
}
