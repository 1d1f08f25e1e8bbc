//! Circuit breaker with a rolling error-rate window.
//!
//! Closed: every request proceeds and outcomes accumulate in a rolling window.
//! Once the window holds at least `request_volume_threshold` outcomes and the
//! error share reaches `error_threshold_pct`, the breaker opens. Open: requests
//! are short-circuited with a fallback until `sleep_window` has elapsed, after
//! which the breaker goes half-open and lets `half_open_permits` probes
//! through. A successful probe closes it; a failed one reopens it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simtime::SimInstant;

/// Response code token used as the fallback when nothing is cached.
pub const UNAVAILABLE: &str = "UNAVAILABLE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BreakerConfig {
    pub sleep_window_ms: u64,
    pub request_volume_threshold: u32,
    pub error_threshold_pct: u32,
    pub rolling_window_ms: u64,
    pub call_timeout_ms: u64,
    pub half_open_permits: u32,
}

impl Default for BreakerConfig {
    fn default() -> Self {
        BreakerConfig {
            sleep_window_ms: 5_000,
            request_volume_threshold: 20,
            error_threshold_pct: 50,
            rolling_window_ms: 10_000,
            call_timeout_ms: 1_000,
            half_open_permits: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("invalid breaker configuration: {0}")]
pub struct InvalidBreakerConfig(&'static str);

impl BreakerConfig {
    pub fn validate(&self) -> Result<(), InvalidBreakerConfig> {
        if self.sleep_window_ms == 0 {
            return Err(InvalidBreakerConfig("sleep window must be positive"));
        }
        if self.request_volume_threshold == 0 {
            return Err(InvalidBreakerConfig("request volume threshold must be positive"));
        }
        if self.error_threshold_pct == 0 || self.error_threshold_pct > 100 {
            return Err(InvalidBreakerConfig("error threshold must be in (0, 100]"));
        }
        if self.rolling_window_ms == 0 || self.call_timeout_ms == 0 || self.half_open_permits == 0 {
            return Err(InvalidBreakerConfig("windows, timeout and permits must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Success,
    Failure,
    Timeout,
    ShortCircuited,
}

impl OutcomeKind {
    pub fn is_error(self) -> bool {
        matches!(self, OutcomeKind::Failure | OutcomeKind::Timeout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallOutcome {
    pub kind: OutcomeKind,
    pub at: SimInstant,
    pub latency_ms: u64,
}

impl CallOutcome {
    pub fn new(kind: OutcomeKind, at: SimInstant, latency_ms: u64) -> Self {
        let latency_ms = if kind == OutcomeKind::ShortCircuited { 0 } else { latency_ms };
        CallOutcome { kind, at, latency_ms }
    }

    pub fn short_circuited(at: SimInstant) -> Self {
        Self::new(OutcomeKind::ShortCircuited, at, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BreakerMode {
    Closed,
    Open { opened_at: SimInstant },
    HalfOpen { permits_left: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fallback {
    Cached(String),
    Unavailable,
}

impl Fallback {
    pub fn body(&self) -> &str {
        match self {
            Fallback::Cached(s) => s,
            Fallback::Unavailable => UNAVAILABLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Proceed,
    ShortCircuit(Fallback),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tallies {
    pub success: u64,
    pub failure: u64,
    pub timeout: u64,
    pub short_circuited: u64,
}

impl Tallies {
    pub fn add(&mut self, kind: OutcomeKind) {
        match kind {
            OutcomeKind::Success => self.success += 1,
            OutcomeKind::Failure => self.failure += 1,
            OutcomeKind::Timeout => self.timeout += 1,
            OutcomeKind::ShortCircuited => self.short_circuited += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.success + self.failure + self.timeout + self.short_circuited
    }
}

#[derive(Debug, Clone)]
pub struct CircuitBreaker {
    config: BreakerConfig,
    mode: BreakerMode,
    window: VecDeque<CallOutcome>,
    errors_in_window: usize,
    cached_response: Option<String>,
    tallies: Tallies,
}

impl CircuitBreaker {
    pub fn new(config: BreakerConfig) -> Result<Self, InvalidBreakerConfig> {
        config.validate()?;
        Ok(CircuitBreaker {
            config,
            mode: BreakerMode::Closed,
            window: VecDeque::new(),
            errors_in_window: 0,
            cached_response: None,
            tallies: Tallies::default(),
        })
    }

    pub fn config(&self) -> &BreakerConfig {
        &self.config
    }

    pub fn mode(&self) -> BreakerMode {
        self.mode
    }

    pub fn tallies(&self) -> Tallies {
        self.tallies
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn cached_response(&self) -> Option<&str> {
        self.cached_response.as_deref()
    }

    fn fallback(&self) -> Fallback {
        match &self.cached_response {
            Some(r) => Fallback::Cached(r.clone()),
            None => Fallback::Unavailable,
        }
    }

    pub fn allow_request(&mut self, now: SimInstant) -> Decision {
        match self.mode {
            BreakerMode::Closed => Decision::Proceed,
            BreakerMode::Open { opened_at } => {
                if now.since(opened_at) < self.config.sleep_window_ms {
                    Decision::ShortCircuit(self.fallback())
                } else {
                    self.mode = BreakerMode::HalfOpen { permits_left: self.config.half_open_permits - 1 };
                    Decision::Proceed
                }
            }
            BreakerMode::HalfOpen { permits_left } if permits_left > 0 => {
                self.mode = BreakerMode::HalfOpen { permits_left: permits_left - 1 };
                Decision::Proceed
            }
            BreakerMode::HalfOpen { .. } => Decision::ShortCircuit(self.fallback()),
        }
    }

    /// Records an outcome and returns the resulting mode.
    ///
    /// Short-circuited outcomes only touch the tallies. `response` is cached on
    /// success and served as the fallback while open.
    pub fn record(&mut self, outcome: CallOutcome, response: Option<String>) -> BreakerMode {
        self.tallies.add(outcome.kind);
        if outcome.kind == OutcomeKind::ShortCircuited {
            return self.mode;
        }
        if outcome.kind == OutcomeKind::Success {
            if let Some(r) = response {
                self.cached_response = Some(r);
            }
        }
        let now = outcome.at;
        self.window.push_back(outcome);
        if outcome.kind.is_error() {
            self.errors_in_window += 1;
        }
        self.prune(now);

        match self.mode {
            BreakerMode::Closed => {
                let size = self.window.len() as u64;
                let errors = self.errors_in_window as u64;
                if size >= u64::from(self.config.request_volume_threshold)
                    && errors * 100 >= u64::from(self.config.error_threshold_pct) * size
                {
                    self.mode = BreakerMode::Open { opened_at: now };
                }
            }
            BreakerMode::HalfOpen { .. } => {
                if outcome.kind == OutcomeKind::Success {
                    self.mode = BreakerMode::Closed;
                    self.window.clear();
                    self.errors_in_window = 0;
                } else {
                    self.mode = BreakerMode::Open { opened_at: now };
                }
            }
            BreakerMode::Open { .. } => {}
        }
        self.mode
    }

    fn prune(&mut self, now: SimInstant) {
        // keep only outcomes with at > now - rolling_window
        while let Some(front) = self.window.front() {
            if front.at.as_millis() + self.config.rolling_window_ms <= now.as_millis() {
                if front.kind.is_error() {
                    self.errors_in_window -= 1;
                }
                self.window.pop_front();
            } else {
                break;
            }
        }
    }
}
