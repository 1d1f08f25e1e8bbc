//! Virtual clock and deterministic event scheduler.
//!
//! Every other module reads time from a [`Scheduler`] and defers work by
//! scheduling events on it. Events are ordered by `(fire_at, sequence)`, so
//! events due at the same instant fire in the order they were scheduled.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MILLIS_PER_MINUTE: u64 = 60_000;

/// A point on the simulated timeline, in milliseconds since the start of the run.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimInstant(u64);

impl SimInstant {
    pub const ZERO: SimInstant = SimInstant(0);

    pub const fn from_millis(ms: u64) -> Self {
        SimInstant(ms)
    }

    pub const fn from_minutes(min: u64) -> Self {
        SimInstant(min * MILLIS_PER_MINUTE)
    }

    pub const fn as_millis(self) -> u64 {
        self.0
    }

    pub fn plus(self, ms: u64) -> Self {
        SimInstant(self.0 + ms)
    }

    /// Milliseconds elapsed since `earlier`, saturating at zero.
    pub fn since(self, earlier: SimInstant) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for SimInstant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total_s = self.0 / 1000;
        write!(f, "{:02}:{:02}.{:03}", total_s / 60, total_s % 60, self.0 % 1000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimTimeError {
    #[error("negative delay {0} ms")]
    NegativeDelay(i64),
    #[error("cannot run backwards to {target} (now {now})")]
    TimeReversal { now: SimInstant, target: SimInstant },
}

/// Handle returned by [`Scheduler::schedule`]; permits cancellation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventHandle(u64);

/// An event waiting in the queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledEvent<E> {
    pub fire_at: SimInstant,
    pub sequence: u64,
    pub action: E,
}

impl<E> ScheduledEvent<E> {
    fn key(&self) -> (SimInstant, u64) {
        (self.fire_at, self.sequence)
    }
}

impl<E: Eq> Ord for ScheduledEvent<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

impl<E: Eq> PartialOrd for ScheduledEvent<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-threaded discrete-event scheduler over an opaque action type.
#[derive(Debug)]
pub struct Scheduler<E> {
    now: SimInstant,
    next_sequence: u64,
    queue: BinaryHeap<Reverse<ScheduledEvent<E>>>,
    cancelled: HashSet<u64>,
    // 0.0 = fast-forward; otherwise wall-clock ms slept per simulated ms.
    time_scale: f64,
    fired: Vec<(SimInstant, u64)>,
    record_trace: bool,
}

impl<E: Eq> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Eq> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler {
            now: SimInstant::ZERO,
            next_sequence: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            time_scale: 0.0,
            fired: Vec::new(),
            record_trace: false,
        }
    }

    /// Sets the wall-clock scale factor. Negative and non-finite values are treated as 0.
    pub fn set_time_scale(&mut self, scale: f64) {
        self.time_scale = if scale.is_finite() && scale > 0.0 { scale } else { 0.0 };
    }

    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    /// Keep a `(fire_at, sequence)` record of every fired event.
    pub fn record_firings(&mut self, on: bool) {
        self.record_trace = on;
    }

    pub fn firings(&self) -> &[(SimInstant, u64)] {
        &self.fired
    }

    pub fn now(&self) -> SimInstant {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, delay_ms: i64, action: E) -> Result<EventHandle, SimTimeError> {
        if delay_ms < 0 {
            return Err(SimTimeError::NegativeDelay(delay_ms));
        }
        Ok(self.schedule_in(delay_ms as u64, action))
    }

    /// Infallible variant of [`schedule`](Self::schedule) for unsigned delays.
    pub fn schedule_in(&mut self, delay_ms: u64, action: E) -> EventHandle {
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Reverse(ScheduledEvent {
            fire_at: self.now.plus(delay_ms),
            sequence,
            action,
        }));
        EventHandle(sequence)
    }

    pub fn schedule_at(&mut self, at: SimInstant, action: E) -> Result<EventHandle, SimTimeError> {
        if at < self.now {
            return Err(SimTimeError::TimeReversal { now: self.now, target: at });
        }
        Ok(self.schedule_in(at.since(self.now), action))
    }

    /// Cancels a pending event. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        let live = self
            .queue
            .iter()
            .any(|Reverse(ev)| ev.sequence == handle.0 && !self.cancelled.contains(&ev.sequence));
        if live {
            self.cancelled.insert(handle.0);
        }
        live
    }

    /// Pops the next event due at or before `horizon`, advancing the clock to
    /// its fire time. Returns `None` once nothing is due.
    pub fn pop_due(&mut self, horizon: SimInstant) -> Option<ScheduledEvent<E>> {
        loop {
            let due = matches!(self.queue.peek(), Some(Reverse(ev)) if ev.fire_at <= horizon);
            if !due {
                return None;
            }
            let Reverse(ev) = self.queue.pop()?;
            if self.cancelled.remove(&ev.sequence) {
                continue;
            }
            self.advance(ev.fire_at);
            if self.record_trace {
                self.fired.push((ev.fire_at, ev.sequence));
            }
            return Some(ev);
        }
    }

    /// Moves the clock forward to `t` without firing anything.
    pub fn advance_to(&mut self, t: SimInstant) -> Result<(), SimTimeError> {
        if t < self.now {
            return Err(SimTimeError::TimeReversal { now: self.now, target: t });
        }
        self.advance(t);
        Ok(())
    }

    /// Fires every event due at or before `t` through `handler`, then sets the
    /// clock to `t`. The handler may schedule further events.
    pub fn run_until<F>(&mut self, t: SimInstant, mut handler: F) -> Result<usize, SimTimeError>
    where
        F: FnMut(&mut Self, E),
    {
        if t < self.now {
            return Err(SimTimeError::TimeReversal { now: self.now, target: t });
        }
        let mut fired = 0;
        while let Some(ev) = self.pop_due(t) {
            fired += 1;
            handler(self, ev.action);
        }
        self.advance(t);
        Ok(fired)
    }

    fn advance(&mut self, t: SimInstant) {
        debug_assert!(t >= self.now);
        if self.time_scale > 0.0 && t > self.now {
            let wall_ms = t.since(self.now) as f64 * self.time_scale;
            std::thread::sleep(Duration::from_secs_f64(wall_ms / 1000.0));
        }
        self.now = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_clock_reads_zero() {
        let s: Scheduler<u32> = Scheduler::new();
        assert_eq!(s.now(), SimInstant::ZERO);
        assert_eq!(s.now(), s.now());
    }

    #[test]
    fn run_until_sets_clock() {
        let mut s: Scheduler<u32> = Scheduler::new();
        let n = s.run_until(SimInstant::from_millis(60_000), |_, _| {}).unwrap();
        assert_eq!(n, 0);
        assert_eq!(s.now().as_millis(), 60_000);
    }

    #[test]
    fn zero_delay_fires_now() {
        let mut s = Scheduler::new();
        s.run_until(SimInstant::from_millis(7), |_, _: u32| {}).unwrap();
        s.schedule(0, 1u32).unwrap();
        let ev = s.pop_due(s.now()).unwrap();
        assert_eq!(ev.fire_at.as_millis(), 7);
        assert_eq!(ev.action, 1);
    }

    #[test]
    fn ties_fire_fifo() {
        let mut s = Scheduler::new();
        s.schedule(5000, 'a').unwrap();
        s.schedule(5000, 'b').unwrap();
        let mut order = Vec::new();
        s.run_until(SimInstant::from_millis(5000), |_, c| order.push(c)).unwrap();
        assert_eq!(order, vec!['a', 'b']);
    }

    #[test]
    fn cancelled_event_never_runs() {
        let mut s = Scheduler::new();
        let h = s.schedule(10, 1u32).unwrap();
        s.schedule(10, 2u32).unwrap();
        assert!(s.cancel(h));
        assert!(!s.cancel(h));
        let mut seen = Vec::new();
        s.run_until(SimInstant::from_millis(100), |_, e| seen.push(e)).unwrap();
        assert_eq!(seen, vec![2]);
        assert_eq!(s.pending(), 0);
    }

    #[test]
    fn negative_delay_rejected() {
        let mut s: Scheduler<u32> = Scheduler::new();
        assert_eq!(s.schedule(-1, 0), Err(SimTimeError::NegativeDelay(-1)));
        assert_eq!(s.pending(), 0);
    }

    #[test]
    fn partial_horizon() {
        let mut s = Scheduler::new();
        for t in [1, 2, 3] {
            s.schedule(t, t).unwrap();
        }
        assert_eq!(s.run_until(SimInstant::from_millis(2), |_, _| {}).unwrap(), 2);
        assert_eq!(s.now().as_millis(), 2);
        assert!(s.run_until(SimInstant::from_millis(1), |_, _| {}).is_err());
        assert_eq!(s.run_until(SimInstant::from_millis(3), |_, _| {}).unwrap(), 1);
    }

    #[test]
    fn handler_can_reschedule() {
        let mut s = Scheduler::new();
        s.schedule(0, 0u32).unwrap();
        let mut count = 0;
        s.run_until(SimInstant::from_millis(10_000), |s, n| {
            count += 1;
            if n < 4 {
                s.schedule(2000, n + 1).unwrap();
            }
        })
        .unwrap();
        assert_eq!(count, 5);
    }

    fn traced_run(seed: u64) -> Vec<(SimInstant, u64)> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s = Scheduler::new();
        s.record_firings(true);
        for i in 0..200u32 {
            s.schedule(rng.gen_range(0..1000), i).unwrap();
        }
        s.run_until(SimInstant::from_millis(2000), |s, i| {
            if i % 7 == 0 {
                s.schedule(i as i64 % 13, i + 1000).unwrap();
            }
        })
        .unwrap();
        s.firings().to_vec()
    }

    #[test]
    fn identical_schedules_give_identical_traces() {
        let a = traced_run(42);
        assert_eq!(a, traced_run(42));
        assert!(a.windows(2).all(|w| w[0] < w[1]), "strict (fire_at, sequence) order");
    }

    #[test]
    fn display_is_minutes_seconds() {
        assert_eq!(SimInstant::from_millis(61_005).to_string(), "01:01.005");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn fires_in_time_then_fifo_order(delays in proptest::collection::vec(0u64..50, 1..200)) {
                let mut s = Scheduler::new();
                for (i, d) in delays.iter().enumerate() {
                    s.schedule_in(*d, i);
                }
                let mut fired = Vec::new();
                s.run_until(SimInstant::from_millis(100), |s, i| fired.push((s.now().as_millis(), i))).unwrap();
                let mut expected: Vec<(u64, usize)> = delays.iter().copied().zip(0..).collect();
                expected.sort();
                prop_assert_eq!(fired, expected);
            }

            #[test]
            fn cancelled_subset_never_fires(delays in proptest::collection::vec(0u64..50, 1..100), mask in any::<u128>()) {
                let mut s = Scheduler::new();
                let handles: Vec<_> = delays.iter().enumerate().map(|(i, d)| s.schedule_in(*d, i)).collect();
                for (i, h) in handles.iter().enumerate() {
                    if mask >> i & 1 == 1 {
                        prop_assert!(s.cancel(*h));
                    }
                }
                let mut fired = Vec::new();
                s.run_until(SimInstant::from_millis(100), |_, i| fired.push(i)).unwrap();
                prop_assert!(fired.iter().all(|i| mask >> i & 1 == 0));
                prop_assert_eq!(fired.len(), (0..delays.len()).filter(|i| mask >> i & 1 == 0).count());
            }
        }
    }
}
