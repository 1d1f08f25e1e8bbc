//! Message broker and simulated rover fleet.
//!
//! Topics are `command/<rover_id>` (cloud to vehicle) and
//! `telemetry/<rover_id>` (vehicle to cloud). Delivery is at-most-once after a
//! fixed network delay; commands for a detached rover are dropped and counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::net::{TcpStream, ToSocketAddrs};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simtime::SimInstant;

pub const DEFAULT_DELIVERY_DELAY_MS: u64 = 50;

#[derive(Debug, Error)]
pub enum FleetError {
    #[error("malformed topic {0:?}")]
    MalformedTopic(String),
    #[error("command for {command} applied to rover {rover}")]
    RoverMismatch { rover: String, command: String },
    #[error("unknown rover {0:?}")]
    UnknownRover(String),
    #[error("speed_control {0} outside 0..=100")]
    SpeedOutOfRange(u8),
    #[error("decoding payload: {0}")]
    Decode(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Direction {
    Forward,
    Backward,
    Left,
    Right,
    Stop,
}

impl Direction {
    /// Rotation used by the client when no override is configured.
    pub const ROTATION: [Direction; 4] = [Direction::Forward, Direction::Right, Direction::Backward, Direction::Left];
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Direction::Forward => "FORWARD",
            Direction::Backward => "BACKWARD",
            Direction::Left => "LEFT",
            Direction::Right => "RIGHT",
            Direction::Stop => "STOP",
        };
        f.write_str(s)
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FORWARD" => Ok(Direction::Forward),
            "BACKWARD" => Ok(Direction::Backward),
            "LEFT" => Ok(Direction::Left),
            "RIGHT" => Ok(Direction::Right),
            "STOP" => Ok(Direction::Stop),
            other => Err(format!("unknown direction {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandMessage {
    pub rover_id: String,
    pub speed_control: u8,
    pub next_move_direction: Direction,
    pub sequence: u64,
    #[serde(rename = "sent_at_ms")]
    pub sent_at: SimInstant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub rover_id: String,
    pub infrared_proximity: f64,
    pub ultrasonic: f64,
    pub temperature: f64,
    pub humidity: f64,
    pub accel: [f64; 3],
    #[serde(rename = "at_ms")]
    pub at: SimInstant,
}

impl TelemetryMessage {
    pub fn is_finite(&self) -> bool {
        [self.infrared_proximity, self.ultrasonic, self.temperature, self.humidity]
            .iter()
            .chain(self.accel.iter())
            .all(|v| v.is_finite())
    }
}

/// Either payload, as read back from a newline-delimited stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireMessage {
    Command(CommandMessage),
    Telemetry(TelemetryMessage),
}

pub fn encode<T: Serialize>(msg: &T) -> Vec<u8> {
    serde_json::to_vec(msg).expect("messages serialize")
}

pub fn decode_line(line: &str) -> Result<WireMessage, FleetError> {
    Ok(serde_json::from_str(line.trim_end())?)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Topic {
    Command(String),
    Telemetry(String),
}

impl Topic {
    pub fn rover_id(&self) -> &str {
        match self {
            Topic::Command(r) | Topic::Telemetry(r) => r,
        }
    }
}

impl FromStr for Topic {
    type Err = FleetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || FleetError::MalformedTopic(s.to_owned());
        let (kind, rover) = s.split_once('/').ok_or_else(bad)?;
        if rover.is_empty() || rover.contains('/') || rover.contains(char::is_whitespace) {
            return Err(bad());
        }
        match kind {
            "command" => Ok(Topic::Command(rover.to_owned())),
            "telemetry" => Ok(Topic::Telemetry(rover.to_owned())),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topic::Command(r) => write!(f, "command/{r}"),
            Topic::Telemetry(r) => write!(f, "telemetry/{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subscriber {
    Rover(String),
    Cloud,
}

/// A message accepted by the broker and waiting for delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub topic: Topic,
    pub payload: Vec<u8>,
    pub published_at: SimInstant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PublishReceipt {
    Accepted { deliver_at: SimInstant, envelope: Envelope },
    Dropped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicStats {
    pub published: u64,
    pub delivered: u64,
    pub dropped: u64,
}

pub struct Broker {
    delay_ms: u64,
    detached: BTreeSet<String>,
    subscribers: BTreeMap<Topic, BTreeSet<Subscriber>>,
    stats: BTreeMap<String, TopicStats>,
    mirror: Option<Box<dyn Write + Send>>,
    mirror_errors: u64,
}

impl fmt::Debug for Broker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Broker")
            .field("delay_ms", &self.delay_ms)
            .field("detached", &self.detached)
            .field("stats", &self.stats)
            .field("mirror", &self.mirror.is_some())
            .finish()
    }
}

impl Default for Broker {
    fn default() -> Self {
        Self::new(DEFAULT_DELIVERY_DELAY_MS)
    }
}

impl Broker {
    pub fn new(delay_ms: u64) -> Self {
        Broker {
            delay_ms,
            detached: BTreeSet::new(),
            subscribers: BTreeMap::new(),
            stats: BTreeMap::new(),
            mirror: None,
            mirror_errors: 0,
        }
    }

    pub fn delay_ms(&self) -> u64 {
        self.delay_ms
    }

    pub fn subscribe(&mut self, topic: &str, who: Subscriber) -> Result<(), FleetError> {
        let topic: Topic = topic.parse()?;
        self.subscribers.entry(topic).or_default().insert(who);
        Ok(())
    }

    /// Attaches a rover: it subscribes to its command topic and receives deliveries.
    pub fn attach(&mut self, rover_id: &str) {
        self.detached.remove(rover_id);
        self.subscribers
            .entry(Topic::Command(rover_id.to_owned()))
            .or_default()
            .insert(Subscriber::Rover(rover_id.to_owned()));
    }

    pub fn detach(&mut self, rover_id: &str) {
        self.detached.insert(rover_id.to_owned());
    }

    pub fn is_attached(&self, rover_id: &str) -> bool {
        !self.detached.contains(rover_id)
            && self
                .subscribers
                .get(&Topic::Command(rover_id.to_owned()))
                .is_some_and(|s| !s.is_empty())
    }

    /// Mirrors every delivered payload as one JSON line to `sink`.
    pub fn set_mirror(&mut self, sink: Box<dyn Write + Send>) {
        self.mirror = Some(sink);
    }

    pub fn mirror_errors(&self) -> u64 {
        self.mirror_errors
    }

    fn deliverable(&self, topic: &Topic) -> bool {
        match topic {
            Topic::Command(rover) if self.detached.contains(rover) => false,
            _ => self.subscribers.get(topic).is_some_and(|s| !s.is_empty()),
        }
    }

    pub fn publish(&mut self, topic: &str, payload: Vec<u8>, now: SimInstant) -> Result<PublishReceipt, FleetError> {
        let parsed: Topic = topic.parse()?;
        let deliverable = self.deliverable(&parsed);
        let stats = self.stats.entry(parsed.to_string()).or_default();
        stats.published += 1;
        if !deliverable {
            stats.dropped += 1;
            return Ok(PublishReceipt::Dropped);
        }
        Ok(PublishReceipt::Accepted {
            deliver_at: now.plus(self.delay_ms),
            envelope: Envelope { topic: parsed, payload, published_at: now },
        })
    }

    /// Completes delivery of an accepted envelope. Returns the recipients, or
    /// `None` if the endpoint went away in flight (counted as a drop).
    pub fn deliver(&mut self, envelope: &Envelope) -> Option<Vec<Subscriber>> {
        let deliverable = self.deliverable(&envelope.topic);
        let stats = self.stats.entry(envelope.topic.to_string()).or_default();
        if !deliverable {
            stats.dropped += 1;
            return None;
        }
        stats.delivered += 1;
        if let Some(sink) = self.mirror.as_mut() {
            let res = sink.write_all(&envelope.payload).and_then(|_| sink.write_all(b"\n"));
            if res.is_err() {
                self.mirror_errors += 1;
            }
        }
        Some(self.subscribers[&envelope.topic].iter().cloned().collect())
    }

    pub fn stats(&self) -> &BTreeMap<String, TopicStats> {
        &self.stats
    }

    pub fn total(&self) -> TopicStats {
        self.stats.values().fold(TopicStats::default(), |acc, s| TopicStats {
            published: acc.published + s.published,
            delivered: acc.delivered + s.delivered,
            dropped: acc.dropped + s.dropped,
        })
    }

    pub fn total_for(&self, prefix: &str) -> TopicStats {
        self.stats
            .iter()
            .filter(|(t, _)| t.starts_with(prefix))
            .fold(TopicStats::default(), |acc, (_, s)| TopicStats {
                published: acc.published + s.published,
                delivered: acc.delivered + s.delivered,
                dropped: acc.dropped + s.dropped,
            })
    }
}

/// Opens a TCP connection that can be handed to [`Broker::set_mirror`].
pub fn connect_mirror<A: ToSocketAddrs>(addr: A) -> Result<Box<dyn Write + Send>, FleetError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    Ok(Box::new(stream))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoverState {
    pub rover_id: String,
    pub heading: Direction,
    pub speed: u8,
    pub last_applied_sequence: u64,
    pub applied_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplyResult {
    Applied,
    Stale,
}

impl RoverState {
    pub fn new(rover_id: &str) -> Self {
        RoverState {
            rover_id: rover_id.to_owned(),
            heading: Direction::Stop,
            speed: 0,
            last_applied_sequence: 0,
            applied_count: 0,
        }
    }

    /// Applies `cmd` if it is newer than anything applied so far.
    pub fn apply(&mut self, cmd: &CommandMessage) -> Result<ApplyResult, FleetError> {
        if cmd.rover_id != self.rover_id {
            return Err(FleetError::RoverMismatch { rover: self.rover_id.clone(), command: cmd.rover_id.clone() });
        }
        if cmd.speed_control > 100 {
            return Err(FleetError::SpeedOutOfRange(cmd.speed_control));
        }
        if cmd.sequence <= self.last_applied_sequence {
            return Ok(ApplyResult::Stale);
        }
        self.heading = cmd.next_move_direction;
        self.speed = cmd.speed_control;
        self.last_applied_sequence = cmd.sequence;
        self.applied_count += 1;
        Ok(ApplyResult::Applied)
    }
}

pub fn rover_id(index: usize) -> String {
    format!("r{:02}", index + 1)
}

/// The simulated vehicles.
#[derive(Debug, Clone)]
pub struct Fleet {
    rovers: BTreeMap<String, RoverState>,
}

impl Fleet {
    pub fn new(size: usize) -> Self {
        let rovers = (0..size).map(|i| {
            let id = rover_id(i);
            (id.clone(), RoverState::new(&id))
        });
        Fleet { rovers: rovers.collect() }
    }

    pub fn len(&self) -> usize {
        self.rovers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rovers.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.rovers.keys().map(String::as_str)
    }

    pub fn rover(&self, id: &str) -> Option<&RoverState> {
        self.rovers.get(id)
    }

    pub fn rovers(&self) -> impl Iterator<Item = &RoverState> {
        self.rovers.values()
    }

    pub fn rover_apply(&mut self, rover_id: &str, cmd: &CommandMessage) -> Result<(ApplyResult, &RoverState), FleetError> {
        let rover = self
            .rovers
            .get_mut(rover_id)
            .ok_or_else(|| FleetError::UnknownRover(rover_id.to_owned()))?;
        let res = rover.apply(cmd)?;
        Ok((res, rover))
    }

    /// Samples a telemetry reading and publishes it. Detached rovers emit nothing.
    pub fn rover_emit_telemetry<R: Rng>(
        &self,
        rover_id: &str,
        broker: &mut Broker,
        rng: &mut R,
        now: SimInstant,
    ) -> Result<Option<(TelemetryMessage, PublishReceipt)>, FleetError> {
        if !self.rovers.contains_key(rover_id) {
            return Err(FleetError::UnknownRover(rover_id.to_owned()));
        }
        if !broker.is_attached(rover_id) {
            return Ok(None);
        }
        let msg = sample_telemetry(rover_id, rng, now);
        let receipt = broker.publish(&Topic::Telemetry(rover_id.to_owned()).to_string(), encode(&msg), now)?;
        Ok(Some((msg, receipt)))
    }
}

pub fn sample_telemetry<R: Rng>(rover_id: &str, rng: &mut R, now: SimInstant) -> TelemetryMessage {
    TelemetryMessage {
        rover_id: rover_id.to_owned(),
        infrared_proximity: round2(rng.gen_range(4.0..80.0)),
        ultrasonic: round2(rng.gen_range(2.0..400.0)),
        temperature: round2(rng.gen_range(15.0..35.0)),
        humidity: round2(rng.gen_range(20.0..80.0)),
        accel: [
            round2(rng.gen_range(-2.0..2.0)),
            round2(rng.gen_range(-2.0..2.0)),
            round2(rng.gen_range(9.5..10.1)),
        ],
        at: now,
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}
