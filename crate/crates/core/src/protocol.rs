//! Push-pull wire protocol.
//!
//! Every message is one UTF-8 line holding a JSON object with the fields
//! `type`, `tick`, `sender_id` and `payload`, terminated by `\n`. Events such
//! as tick commands are pushed; bulky payloads (waypoint buffers, sensing
//! snapshots) are pulled by the process that needs them.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimClock;
use crate::manager::RunPhase;
use crate::metrics::{ClientLog, StepTimings};
use crate::types::{Control, VehicleState, WaypointBuffer};

/// `sender_id` used by the manager.
pub const MANAGER_ID: u32 = u32::MAX;

pub const DEFAULT_PORT: u16 = 2000;

const KNOWN_TYPES: [&str; 8] = [
    "REGISTER",
    "REGISTER_ACK",
    "TICK_CMD",
    "CLIENT_DONE",
    "PULL_REQUEST",
    "PULL_REPLY",
    "END",
    "ERROR",
];

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("malformed frame ({reason}): {line}")]
    Malformed { line: String, reason: String },
    #[error("unsupported message type {found:?}; this peer speaks protocol types {KNOWN_TYPES:?}")]
    UnknownType { found: String },
    #[error("truncated frame (no newline before end of stream): {line}")]
    Truncated { line: String },
    #[error("connection closed")]
    Closed,
    #[error("unexpected message: expected {expected}, got {got}")]
    Unexpected { expected: &'static str, got: String },
    #[error("peer reported error {code:?}: {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Command {
    Tick,
    PullWaypointsAndTick,
    End,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Vehicle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ClientMode {
    LocalGreedy,
    EdgeAssisted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Register {
    pub client_kind: ClientKind,
    pub requested_vehicle_index: u32,
}

/// Everything a vehicle client needs to run its control loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientSetup {
    pub clock: SimClock,
    pub mode: ClientMode,
    pub num_lanes: u32,
    pub lane_width: f64,
    pub min_headway: f64,
    pub lookahead_m: f64,
    pub max_speed: f64,
    pub overtake_allowed: bool,
    pub staleness_threshold_ms: f64,
    pub speed_estimate_noise: f64,
    #[serde(default)]
    pub step_work_ms: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterAck {
    pub assigned_id: u32,
    pub setup: ClientSetup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickCmd {
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDone {
    pub control: Control,
    pub timings: StepTimings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PullKind {
    Waypoints,
    Sensing,
    #[serde(other)]
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullRequest {
    pub vehicle_id: u32,
    pub kind: PullKind,
}

/// What the vehicle's own sensors report this tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensing {
    pub me: VehicleState,
    pub neighbors: Vec<VehicleState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PullItem {
    NotAvailable,
    Waypoints(WaypointBuffer),
    Sensing(Sensing),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PullReply {
    pub vehicle_id: u32,
    pub kind: PullKind,
    pub item: PullItem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Duplicate,
    RegistrationClosed,
    UnknownVehicle,
    UnknownKind,
    OutOfOrder,
    Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Body {
    Register(Register),
    RegisterAck(RegisterAck),
    TickCmd(TickCmd),
    ClientDone(ClientDone),
    PullRequest(PullRequest),
    PullReply(PullReply),
    /// Batched end-of-run metric upload from a client.
    End(Box<ClientLog>),
    Error(ErrorPayload),
}

impl Body {
    pub fn type_name(&self) -> &'static str {
        match self {
            Body::Register(_) => "REGISTER",
            Body::RegisterAck(_) => "REGISTER_ACK",
            Body::TickCmd(_) => "TICK_CMD",
            Body::ClientDone(_) => "CLIENT_DONE",
            Body::PullRequest(_) => "PULL_REQUEST",
            Body::PullReply(_) => "PULL_REPLY",
            Body::End(_) => "END",
            Body::Error(_) => "ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub tick: u64,
    pub sender_id: u32,
    #[serde(flatten)]
    pub body: Body,
}

impl Envelope {
    pub fn new(tick: u64, sender_id: u32, body: Body) -> Self {
        Self {
            tick,
            sender_id,
            body,
        }
    }

    pub fn tick_cmd(tick: u64, command: Command) -> Self {
        Self::new(tick, MANAGER_ID, Body::TickCmd(TickCmd { command }))
    }

    pub fn error(tick: u64, code: ErrorCode, message: impl Into<String>) -> Self {
        Self::new(
            tick,
            MANAGER_ID,
            Body::Error(ErrorPayload {
                code,
                message: message.into(),
            }),
        )
    }
}

/// Serializes one envelope into a newline-terminated frame.
pub fn encode(envelope: &Envelope) -> String {
    let mut line = serde_json::to_string(envelope).expect("envelopes always serialize");
    line.push('\n');
    line
}

/// Parses one complete frame, including its trailing newline.
pub fn decode(frame: &str) -> Result<Envelope, ProtocolError> {
    let Some(line) = frame.strip_suffix('\n') else {
        return Err(ProtocolError::Truncated {
            line: frame.to_string(),
        });
    };
    let line = line.strip_suffix('\r').unwrap_or(line);
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| ProtocolError::Malformed {
            line: line.to_string(),
            reason: e.to_string(),
        })?;
    match value.get("type").and_then(|t| t.as_str()) {
        Some(t) if KNOWN_TYPES.contains(&t) => {}
        Some(t) => {
            return Err(ProtocolError::UnknownType {
                found: t.to_string(),
            })
        }
        None => {
            return Err(ProtocolError::Malformed {
                line: line.to_string(),
                reason: "missing string field \"type\"".into(),
            })
        }
    }
    serde_json::from_value(value).map_err(|e| ProtocolError::Malformed {
        line: line.to_string(),
        reason: e.to_string(),
    })
}

/// Reads frames from a byte stream.
pub struct FrameReader<R> {
    inner: R,
    buf: String,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            buf: String::new(),
        }
    }

    /// `Ok(None)` on a clean end of stream.
    pub fn read_frame(&mut self) -> Result<Option<Envelope>, ProtocolError> {
        self.buf.clear();
        let n = self.inner.read_line(&mut self.buf)?;
        if n == 0 {
            return Ok(None);
        }
        decode(&self.buf).map(Some)
    }

    /// Like [`read_frame`](Self::read_frame) but treats end of stream as an error.
    pub fn expect_frame(&mut self) -> Result<Envelope, ProtocolError> {
        self.read_frame()?.ok_or(ProtocolError::Closed)
    }
}

/// Writes whole frames and flushes after each one.
pub struct FrameWriter<W: Write> {
    inner: W,
}

impl<W: Write> FrameWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn send(&mut self, envelope: &Envelope) -> Result<(), ProtocolError> {
        self.inner.write_all(encode(envelope).as_bytes())?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Anything a frame can be pushed to.
pub trait FrameSink: Send + Sync {
    fn send_frame(&self, envelope: &Envelope) -> Result<(), ProtocolError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BroadcastReport {
    pub delivered: Vec<u32>,
    pub disconnected: Vec<u32>,
}

/// Pushes `event` to every peer without waiting for replies.
pub fn broadcast<S: FrameSink + ?Sized>(event: &Envelope, peers: &[(u32, &S)]) -> BroadcastReport {
    let mut report = BroadcastReport::default();
    for (id, sink) in peers {
        match sink.send_frame(event) {
            Ok(()) => report.delivered.push(*id),
            Err(_) => report.disconnected.push(*id),
        }
    }
    report
}

/// Client-side access to pulled payloads.
pub trait PullPort {
    fn pull(&mut self, tick: u64, vehicle_id: u32, kind: PullKind) -> Result<PullItem, ProtocolError>;
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistrationError {
    #[error("vehicle index {0} already registered")]
    Duplicate(u32),
    #[error("registration is closed (phase {0:?})")]
    Closed(RunPhase),
    #[error("vehicle index {index} out of range (scenario has {slots} vehicles)")]
    UnknownVehicle { index: u32, slots: u32 },
}

impl RegistrationError {
    pub fn code(&self) -> ErrorCode {
        match self {
            RegistrationError::Duplicate(_) => ErrorCode::Duplicate,
            RegistrationError::Closed(_) => ErrorCode::RegistrationClosed,
            RegistrationError::UnknownVehicle { .. } => ErrorCode::UnknownVehicle,
        }
    }
}

/// Startup handshake bookkeeping on the manager side.
#[derive(Debug, Clone)]
pub struct Registry {
    phase: RunPhase,
    expected: u32,
    registered: BTreeSet<u32>,
}

impl Registry {
    pub fn new(expected: u32) -> Self {
        let phase = if expected == 0 {
            RunPhase::Running
        } else {
            RunPhase::Registration
        };
        Self {
            phase,
            expected,
            registered: BTreeSet::new(),
        }
    }

    pub fn phase(&self) -> RunPhase {
        self.phase
    }

    pub fn registered(&self) -> &BTreeSet<u32> {
        &self.registered
    }

    /// Assigns the requested vehicle slot; the last expected registration
    /// moves the run into [`RunPhase::Running`].
    pub fn register(&mut self, hello: &Register) -> Result<u32, RegistrationError> {
        if self.phase != RunPhase::Registration {
            return Err(RegistrationError::Closed(self.phase));
        }
        let index = hello.requested_vehicle_index;
        if index >= self.expected {
            return Err(RegistrationError::UnknownVehicle {
                index,
                slots: self.expected,
            });
        }
        if !self.registered.insert(index) {
            return Err(RegistrationError::Duplicate(index));
        }
        if self.registered.len() as u32 == self.expected {
            self.phase = RunPhase::Running;
        }
        Ok(index)
    }

    pub fn advance(&mut self, next: RunPhase) {
        assert!(next >= self.phase, "run phases only move forward");
        self.phase = next;
    }
}
