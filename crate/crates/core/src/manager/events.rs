//! Ordered protocol event log.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub const EVENT_LOG_FILE: &str = "event_log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Register,
    TickCmd,
    PullRequest,
    ClientDone,
    WorldTick,
    EdgeJob,
    EdgeDeposit,
    EdgeFailure,
    EndCmd,
    MetricsUpload,
    Disconnect,
}

/// One line of the log. `seq` is the total order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub wall_us: u64,
    pub tick: u64,
    pub event: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<u32>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

/// Shared, append-only log; clones write to the same sequence.
#[derive(Debug, Clone)]
pub struct EventLog {
    origin: Instant,
    events: Arc<Mutex<Vec<Event>>>,
}

impl Default for EventLog {
    fn default() -> Self {
        Self::new()
    }
}

impl EventLog {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
            events: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn record(&self, tick: u64, event: EventKind, peer: Option<u32>, detail: impl Into<String>) {
        let mut events = self.events.lock().expect("event log poisoned");
        let seq = events.len() as u64;
        events.push(Event {
            seq,
            wall_us: self.origin.elapsed().as_micros() as u64,
            tick,
            event,
            peer,
            detail: detail.into(),
        });
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.events.lock().expect("event log poisoned").clone()
    }

    pub fn write_jsonl(&self, path: &Path) -> std::io::Result<()> {
        let events = self.snapshot();
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

pub fn read_jsonl(path: &Path) -> std::io::Result<Vec<Event>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

/// A breach of the lockstep ordering found in an event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LockstepViolation {
    /// `WORLD_TICK t` precedes a `CLIENT_DONE t`.
    DoneAfterWorldTick { tick: u64, peer: Option<u32> },
    /// `TICK_CMD t+1` precedes `WORLD_TICK t`.
    CommandBeforeWorldTick { tick: u64 },
    /// Broadcast ticks do not increase by one.
    TickGap { previous: u64, next: u64 },
    /// A metrics upload before the END command.
    EarlyMetrics { seq: u64 },
}

/// Checks the lockstep, monotonicity and metrics-silence rules.
pub fn check_lockstep(events: &[Event]) -> Vec<LockstepViolation> {
    let mut out = Vec::new();
    let mut world_tick_seq = std::collections::BTreeMap::new();
    let mut end_seq = None;
    for e in events {
        match e.event {
            EventKind::WorldTick => {
                world_tick_seq.insert(e.tick, e.seq);
            }
            EventKind::EndCmd => {
                end_seq.get_or_insert(e.seq);
            }
            _ => {}
        }
    }
    let mut last_cmd: Option<u64> = None;
    for e in events {
        match e.event {
            EventKind::ClientDone => {
                if world_tick_seq.get(&e.tick).is_some_and(|w| *w < e.seq) {
                    out.push(LockstepViolation::DoneAfterWorldTick {
                        tick: e.tick,
                        peer: e.peer,
                    });
                }
            }
            EventKind::TickCmd => {
                if let Some(prev) = last_cmd {
                    if e.tick != prev + 1 {
                        out.push(LockstepViolation::TickGap {
                            previous: prev,
                            next: e.tick,
                        });
                    }
                    match world_tick_seq.get(&prev) {
                        Some(w) if *w < e.seq => {}
                        _ => out.push(LockstepViolation::CommandBeforeWorldTick { tick: prev }),
                    }
                }
                last_cmd = Some(e.tick);
            }
            EventKind::MetricsUpload => {
                if end_seq.is_none_or(|end| e.seq < end) {
                    out.push(LockstepViolation::EarlyMetrics { seq: e.seq });
                }
            }
            _ => {}
        }
    }
    out
}
