//! Client placement: remote processes over TCP or in-process serial clients.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufReader;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use thiserror::Error;

use crate::client::VehicleClient;
use crate::config::DisconnectPolicy;
use crate::metrics::ClientLog;
use crate::protocol::{
    Body, ClientDone, ClientSetup, Command, Envelope, ErrorCode, FrameReader, FrameSink, FrameWriter,
    ProtocolError, PullItem, PullKind, PullPort, PullReply, RegisterAck, Registry, MANAGER_ID,
};
use crate::types::{VehicleState, WaypointBuffer};
use crate::v2x::{Collector, Key, PayloadKind};
use crate::world::neighbors_of;

use super::events::{EventKind, EventLog};
use super::RunPhase;

/// World states published for sensing pulls at one tick.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensingFrame {
    pub tick: u64,
    pub states: Vec<VehicleState>,
}

/// Answers pull requests from the current sensing frame and the waypoint
/// collector. Requests never see past the manager's current tick.
pub struct PullServer {
    waypoints: Arc<Collector<WaypointBuffer>>,
    sensing: ArcSwap<SensingFrame>,
    lookahead_m: f64,
    events: EventLog,
}

impl PullServer {
    pub fn new(waypoints: Arc<Collector<WaypointBuffer>>, lookahead_m: f64, events: EventLog) -> Self {
        Self {
            waypoints,
            sensing: ArcSwap::from_pointee(SensingFrame::default()),
            lookahead_m,
            events,
        }
    }

    pub fn publish(&self, frame: SensingFrame) {
        self.sensing.store(Arc::new(frame));
    }

    pub fn serve(&self, tick: u64, vehicle_id: u32, kind: PullKind) -> Result<PullItem, ErrorCode> {
        self.events
            .record(tick, EventKind::PullRequest, Some(vehicle_id), format!("{kind:?}").to_lowercase());
        let frame = self.sensing.load();
        let tick = tick.min(frame.tick);
        match kind {
            PullKind::Sensing => Ok(frame
                .states
                .iter()
                .find(|s| s.id == vehicle_id)
                .map(|me| {
                    PullItem::Sensing(crate::protocol::Sensing {
                        me: *me,
                        neighbors: neighbors_of(frame.states.iter(), me, self.lookahead_m),
                    })
                })
                .unwrap_or(PullItem::NotAvailable)),
            PullKind::Waypoints => Ok(self
                .waypoints
                .fetch_latest(Key::new(vehicle_id, PayloadKind::Waypoints), tick)
                .map(|item| PullItem::Waypoints(item.payload.clone()))
                .unwrap_or(PullItem::NotAvailable)),
            PullKind::Unknown => Err(ErrorCode::UnknownKind),
        }
    }
}

/// In-process pulls straight from the server.
pub struct DirectPort<'a> {
    pub server: &'a PullServer,
}

impl PullPort for DirectPort<'_> {
    fn pull(&mut self, tick: u64, vehicle_id: u32, kind: PullKind) -> Result<PullItem, ProtocolError> {
        self.server
            .serve(tick, vehicle_id, kind)
            .map_err(|code| ProtocolError::Remote {
                code,
                message: "unknown payload kind".into(),
            })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("barrier timed out at tick {tick}; missing CLIENT_DONE from {missing:?}")]
    Timeout { tick: u64, missing: Vec<u32> },
    #[error("client {peer} disconnected at tick {tick}: {reason}")]
    Disconnected { tick: u64, peer: u32, reason: String },
    #[error("client {peer} failed at tick {tick}: {message}")]
    Client { tick: u64, peer: u32, message: String },
    #[error("registration incomplete: {registered} of {expected} clients ({reason})")]
    Registration {
        registered: usize,
        expected: usize,
        reason: String,
    },
}

/// One client's answer to a tick.
#[derive(Debug, Clone)]
pub struct Reply {
    pub id: u32,
    pub done: ClientDone,
    pub sent: Instant,
    pub arrival: Instant,
}

#[derive(Debug, Clone)]
pub struct TickResult {
    /// In client id order.
    pub replies: Vec<Reply>,
    pub released: Instant,
    pub duplicates: u64,
    pub dropped: Vec<u32>,
}

pub trait ClientPool {
    fn active(&self) -> Vec<u32>;
    /// Broadcasts the tick command and waits for every active client.
    fn step(&mut self, tick: u64, command: Command, timeout: Duration) -> Result<TickResult, PoolError>;
    /// Sends END and collects the batched uploads.
    fn finish(&mut self, tick: u64, timeout: Duration) -> Vec<ClientLog>;
}

/// All clients in this process, stepped one after another.
pub struct SequentialPool {
    clients: BTreeMap<u32, VehicleClient>,
    server: Arc<PullServer>,
    events: EventLog,
}

impl SequentialPool {
    pub fn new(setups: Vec<ClientSetup>, server: Arc<PullServer>, events: EventLog) -> Self {
        let clients = setups
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                events.record(0, EventKind::Register, Some(i as u32), "in-process");
                (i as u32, VehicleClient::new(i as u32, s))
            })
            .collect();
        Self {
            clients,
            server,
            events,
        }
    }
}

impl ClientPool for SequentialPool {
    fn active(&self) -> Vec<u32> {
        self.clients.keys().copied().collect()
    }

    fn step(&mut self, tick: u64, command: Command, _timeout: Duration) -> Result<TickResult, PoolError> {
        self.events.record(tick, EventKind::TickCmd, None, command_name(command));
        let mut replies = Vec::with_capacity(self.clients.len());
        for (id, client) in self.clients.iter_mut() {
            let sent = Instant::now();
            let mut port = DirectPort {
                server: &self.server,
            };
            let done = client
                .step(tick, command, &mut port)
                .map_err(|e| PoolError::Client {
                    tick,
                    peer: *id,
                    message: e.to_string(),
                })?;
            let arrival = Instant::now();
            self.events.record(tick, EventKind::ClientDone, Some(*id), "");
            replies.push(Reply {
                id: *id,
                done,
                sent,
                arrival,
            });
        }
        Ok(TickResult {
            replies,
            released: Instant::now(),
            duplicates: 0,
            dropped: Vec::new(),
        })
    }

    fn finish(&mut self, tick: u64, _timeout: Duration) -> Vec<ClientLog> {
        self.events.record(tick, EventKind::EndCmd, None, "END");
        let clients = std::mem::take(&mut self.clients);
        clients
            .into_iter()
            .map(|(id, c)| {
                self.events.record(tick, EventKind::MetricsUpload, Some(id), "");
                c.into_log()
            })
            .collect()
    }
}

pub(crate) fn command_name(c: Command) -> &'static str {
    match c {
        Command::Tick => "TICK",
        Command::PullWaypointsAndTick => "PULL_WAYPOINTS_AND_TICK",
        Command::End => "END",
    }
}

struct PeerSink(Mutex<FrameWriter<TcpStream>>);

impl FrameSink for PeerSink {
    fn send_frame(&self, envelope: &Envelope) -> Result<(), ProtocolError> {
        self.0.lock().expect("peer writer poisoned").send(envelope)
    }
}

enum Inbound {
    Registered {
        peer: u32,
        sink: Arc<PeerSink>,
        stream: TcpStream,
    },
    Done {
        peer: u32,
        tick: u64,
        done: ClientDone,
        at: Instant,
    },
    Upload {
        peer: u32,
        log: Box<ClientLog>,
    },
    Gone {
        peer: u32,
        reason: String,
    },
}

struct Peer {
    sink: Arc<PeerSink>,
    stream: TcpStream,
}

struct Shared {
    registry: Mutex<Registry>,
    setups: Vec<ClientSetup>,
    server: Arc<PullServer>,
    events: EventLog,
    tx: Sender<Inbound>,
    stop: AtomicBool,
}

/// Clients in other processes, one TCP connection each.
pub struct RemotePool {
    shared: Arc<Shared>,
    peers: BTreeMap<u32, Peer>,
    rx: Receiver<Inbound>,
    policy: DisconnectPolicy,
    accept: Option<JoinHandle<()>>,
    readers: Arc<Mutex<Vec<JoinHandle<()>>>>,
    /// Uploads that arrived while a tick was still being collected.
    early_uploads: Vec<ClientLog>,
}

impl RemotePool {
    /// Starts accepting registrations on `listener`.
    pub fn start(
        listener: TcpListener,
        setups: Vec<ClientSetup>,
        server: Arc<PullServer>,
        events: EventLog,
        policy: DisconnectPolicy,
    ) -> std::io::Result<Self> {
        listener.set_nonblocking(true)?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let shared = Arc::new(Shared {
            registry: Mutex::new(Registry::new(setups.len() as u32)),
            setups,
            server,
            events,
            tx,
            stop: AtomicBool::new(false),
        });
        let readers = Arc::new(Mutex::new(Vec::new()));
        let accept = {
            let shared = Arc::clone(&shared);
            let readers = Arc::clone(&readers);
            std::thread::Builder::new()
                .name("accept".into())
                .spawn(move || accept_loop(listener, shared, readers))?
        };
        Ok(Self {
            shared,
            peers: BTreeMap::new(),
            rx,
            policy,
            accept: Some(accept),
            readers,
            early_uploads: Vec::new(),
        })
    }

    /// Blocks until every expected client registered. `check` is polled
    /// while waiting and may abort with a reason.
    pub fn wait_registered(
        &mut self,
        timeout: Duration,
        check: &mut dyn FnMut() -> Option<String>,
    ) -> Result<(), PoolError> {
        let expected = self.shared.setups.len();
        let deadline = Instant::now() + timeout;
        while self.peers.len() < expected {
            let fail = |reason: String, n| PoolError::Registration {
                registered: n,
                expected,
                reason,
            };
            if let Some(reason) = check() {
                return Err(fail(reason, self.peers.len()));
            }
            if Instant::now() >= deadline {
                return Err(fail("timed out".into(), self.peers.len()));
            }
            match self.rx.recv_timeout(Duration::from_millis(50)) {
                Ok(Inbound::Registered { peer, sink, stream }) => {
                    self.peers.insert(peer, Peer { sink, stream });
                }
                Ok(Inbound::Gone { peer, reason }) => {
                    return Err(fail(format!("client {peer} left: {reason}"), self.peers.len()));
                }
                Ok(_) | Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(fail("accept loop stopped".into(), self.peers.len()))
                }
            }
        }
        Ok(())
    }

    fn drop_peer(&mut self, peer: u32) {
        if let Some(p) = self.peers.remove(&peer) {
            p.stream.shutdown(Shutdown::Both).ok();
        }
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        for p in self.peers.values() {
            p.stream.shutdown(Shutdown::Both).ok();
        }
        if let Some(h) = self.accept.take() {
            h.join().ok();
        }
        let readers = std::mem::take(&mut *self.readers.lock().expect("reader list poisoned"));
        for h in readers {
            h.join().ok();
        }
        self.shared
            .registry
            .lock()
            .expect("registry poisoned")
            .advance(RunPhase::Finished);
    }
}

impl Drop for RemotePool {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl ClientPool for RemotePool {
    fn active(&self) -> Vec<u32> {
        self.peers.keys().copied().collect()
    }

    fn step(&mut self, tick: u64, command: Command, timeout: Duration) -> Result<TickResult, PoolError> {
        let events = self.shared.events.clone();
        events.record(tick, EventKind::TickCmd, None, command_name(command));
        let frame = Envelope::tick_cmd(tick, command);
        let sent = Instant::now();
        let mut dead = Vec::new();
        for (id, p) in &self.peers {
            if let Err(e) = p.sink.send_frame(&frame) {
                dead.push((*id, e.to_string()));
            }
        }
        let mut dropped = Vec::new();
        for (peer, reason) in dead {
            events.record(tick, EventKind::Disconnect, Some(peer), reason.clone());
            self.drop_peer(peer);
            if self.policy == DisconnectPolicy::Abort {
                return Err(PoolError::Disconnected { tick, peer, reason });
            }
            dropped.push(peer);
        }

        let deadline = sent + timeout;
        let mut got: BTreeMap<u32, Reply> = BTreeMap::new();
        let mut duplicates = 0;
        while got.len() < self.peers.len() {
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(wait) {
                Ok(Inbound::Done { peer, tick: t, done, at }) => {
                    if t != tick || got.contains_key(&peer) || !self.peers.contains_key(&peer) {
                        duplicates += 1;
                        log::warn!("ignoring CLIENT_DONE({t}) from {peer} during tick {tick}");
                        continue;
                    }
                    got.insert(
                        peer,
                        Reply {
                            id: peer,
                            done,
                            sent,
                            arrival: at,
                        },
                    );
                }
                Ok(Inbound::Gone { peer, reason }) => {
                    if !self.peers.contains_key(&peer) {
                        continue;
                    }
                    self.drop_peer(peer);
                    if self.policy == DisconnectPolicy::Abort {
                        return Err(PoolError::Disconnected { tick, peer, reason });
                    }
                    got.remove(&peer);
                    dropped.push(peer);
                }
                Ok(Inbound::Upload { log, .. }) => self.early_uploads.push(*log),
                Ok(Inbound::Registered { stream, .. }) => {
                    stream.shutdown(Shutdown::Both).ok();
                }
                Err(_) => {
                    let missing = self
                        .peers
                        .keys()
                        .filter(|id| !got.contains_key(id))
                        .copied()
                        .collect();
                    return Err(PoolError::Timeout { tick, missing });
                }
            }
        }
        Ok(TickResult {
            replies: got.into_values().collect(),
            released: Instant::now(),
            duplicates,
            dropped,
        })
    }

    fn finish(&mut self, tick: u64, timeout: Duration) -> Vec<ClientLog> {
        self.shared
            .registry
            .lock()
            .expect("registry poisoned")
            .advance(RunPhase::Draining);
        let events = self.shared.events.clone();
        events.record(tick, EventKind::EndCmd, None, "END");
        let frame = Envelope::tick_cmd(tick, Command::End);
        let mut waiting: BTreeSet<u32> = BTreeSet::new();
        for (id, p) in &self.peers {
            if p.sink.send_frame(&frame).is_ok() {
                waiting.insert(*id);
            }
        }
        let mut logs: Vec<ClientLog> = std::mem::take(&mut self.early_uploads);
        for l in &logs {
            waiting.remove(&l.client_id);
        }
        let deadline = Instant::now() + timeout;
        while !waiting.is_empty() {
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(wait) {
                Ok(Inbound::Upload { peer, log }) => {
                    waiting.remove(&peer);
                    logs.push(*log);
                }
                Ok(Inbound::Gone { peer, .. }) => {
                    waiting.remove(&peer);
                }
                Ok(_) => {}
                Err(_) => break,
            }
        }
        self.shutdown();
        logs
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, readers: Arc<Mutex<Vec<JoinHandle<()>>>>) {
    while !shared.stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false).ok();
                stream.set_nodelay(true).ok();
                let shared = Arc::clone(&shared);
                match std::thread::Builder::new()
                    .name("peer".into())
                    .spawn(move || serve_peer(stream, shared))
                {
                    Ok(h) => readers.lock().expect("reader list poisoned").push(h),
                    Err(e) => log::error!("cannot spawn reader thread: {e}"),
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn serve_peer(stream: TcpStream, shared: Arc<Shared>) {
    let (read_half, write_half) = match (stream.try_clone(), stream.try_clone()) {
        (Ok(r), Ok(w)) => (r, w),
        _ => return,
    };
    let mut reader = FrameReader::new(BufReader::new(read_half));
    let sink = Arc::new(PeerSink(Mutex::new(FrameWriter::new(write_half))));

    let hello = match reader.read_frame() {
        Ok(Some(Envelope {
            body: Body::Register(r),
            ..
        })) => r,
        Ok(Some(other)) => {
            sink.send_frame(&Envelope::error(
                0,
                ErrorCode::Protocol,
                format!("expected REGISTER, got {}", other.body.type_name()),
            ))
            .ok();
            return;
        }
        Ok(None) => return,
        Err(e) => {
            sink.send_frame(&Envelope::error(0, ErrorCode::Protocol, e.to_string())).ok();
            return;
        }
    };
    let registered = shared.registry.lock().expect("registry poisoned").register(&hello);
    let id = match registered {
        Ok(id) => id,
        Err(e) => {
            log::warn!("rejecting registration: {e}");
            sink.send_frame(&Envelope::error(0, e.code(), e.to_string())).ok();
            return;
        }
    };
    shared.events.record(0, EventKind::Register, Some(id), "");
    let ack = Envelope::new(
        0,
        MANAGER_ID,
        Body::RegisterAck(RegisterAck {
            assigned_id: id,
            setup: shared.setups[id as usize].clone(),
        }),
    );
    if sink.send_frame(&ack).is_err() {
        shared
            .tx
            .send(Inbound::Gone {
                peer: id,
                reason: "could not acknowledge".into(),
            })
            .ok();
        return;
    }
    shared
        .tx
        .send(Inbound::Registered {
            peer: id,
            sink: Arc::clone(&sink),
            stream,
        })
        .ok();

    loop {
        let frame = match reader.read_frame() {
            Ok(Some(f)) => f,
            Ok(None) => {
                gone(&shared, id, "connection closed".into());
                return;
            }
            Err(e) => {
                gone(&shared, id, e.to_string());
                return;
            }
        };
        match frame.body {
            Body::PullRequest(req) => {
                let reply = if req.vehicle_id != id {
                    Envelope::error(frame.tick, ErrorCode::Protocol, "pulls are limited to the own vehicle")
                } else {
                    match shared.server.serve(frame.tick, id, req.kind) {
                        Ok(item) => Envelope::new(
                            frame.tick,
                            MANAGER_ID,
                            Body::PullReply(PullReply {
                                vehicle_id: id,
                                kind: req.kind,
                                item,
                            }),
                        ),
                        Err(code) => Envelope::error(frame.tick, code, "unknown payload kind"),
                    }
                };
                if sink.send_frame(&reply).is_err() {
                    gone(&shared, id, "reply failed".into());
                    return;
                }
            }
            Body::ClientDone(done) => {
                let at = Instant::now();
                shared.events.record(frame.tick, EventKind::ClientDone, Some(id), "");
                shared
                    .tx
                    .send(Inbound::Done {
                        peer: id,
                        tick: frame.tick,
                        done,
                        at,
                    })
                    .ok();
            }
            Body::End(log) => {
                shared.events.record(frame.tick, EventKind::MetricsUpload, Some(id), "");
                shared.tx.send(Inbound::Upload { peer: id, log }).ok();
            }
            Body::Error(e) => {
                gone(&shared, id, format!("{:?}: {}", e.code, e.message));
                return;
            }
            other => {
                log::warn!("ignoring {} from client {id}", other.type_name());
            }
        }
    }
}

fn gone(shared: &Shared, id: u32, reason: String) {
    if !shared.stop.load(Ordering::Acquire) {
        shared.events.record(0, EventKind::Disconnect, Some(id), reason.clone());
    }
    shared.tx.send(Inbound::Gone { peer: id, reason }).ok();
}
