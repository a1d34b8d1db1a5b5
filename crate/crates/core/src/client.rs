//! Vehicle client.
//!
//! Each tick the client pulls its own sensing snapshot, optionally pulls a
//! newly delivered edge buffer, and answers with exactly one control. Edge
//! buffers are followed while fresh and locally valid; otherwise the vehicle
//! drives with the greedy lane-keeping planner.

use std::io::{BufReader, ErrorKind};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::metrics::{ClientCounters, ClientLog, StepTimings, TrafficRecord};
use crate::protocol::{
    Body, ClientDone, ClientKind, ClientMode, ClientSetup, Command, Envelope, ErrorCode,
    FrameReader, FrameWriter, ProtocolError, PullItem, PullKind, PullPort, PullRequest, Register,
};
use crate::types::{Control, ControlSource, VehicleState, WaypointBuffer};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("tick {got} arrived out of order (expected {expected})")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("no sensing snapshot available for vehicle {0}")]
    MissingSensing(u32),
    #[error("manager rejected the client ({code:?}): {message}")]
    Rejected { code: ErrorCode, message: String },
    #[error("cannot reach manager at {addr}: {source}")]
    Connect { addr: String, source: std::io::Error },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

/// Inputs of the greedy planner beyond the vehicle's own sensing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreedyParams {
    pub num_lanes: u32,
    pub min_headway: f64,
    pub edge_dt_s: f64,
    pub max_speed: f64,
    pub overtake_allowed: bool,
}

impl GreedyParams {
    pub fn from_setup(setup: &ClientSetup) -> Self {
        Self {
            num_lanes: setup.num_lanes,
            min_headway: setup.min_headway,
            edge_dt_s: setup.clock.edge_dt_s,
            max_speed: setup.max_speed,
            overtake_allowed: setup.overtake_allowed,
        }
    }
}

/// Distance closed on a vehicle ahead while shedding a `surplus` m/s speed
/// advantage at 1 m/s per edge step, counting the coming step.
pub fn closing_distance(surplus: f64, edge_dt_s: f64) -> f64 {
    let mut d = 0.0;
    let mut m = surplus;
    while m > 1e-9 {
        d += m * edge_dt_s;
        m -= 1.0;
    }
    d
}

fn nearest_ahead<'a>(me: &VehicleState, neighbors: &'a [VehicleState], lane: u32) -> Option<&'a VehicleState> {
    neighbors
        .iter()
        .filter(|n| n.lane == lane && n.s >= me.s)
        .min_by(|a, b| a.s.total_cmp(&b.s).then(a.id.cmp(&b.id)))
}

fn lane_gap_ok(me: &VehicleState, neighbors: &[VehicleState], lane: u32, p: &GreedyParams) -> bool {
    neighbors.iter().filter(|n| n.lane == lane).all(|n| {
        let ds = n.s - me.s;
        if ds >= 0.0 {
            ds - closing_distance((me.v - n.v).max(0.0), p.edge_dt_s) >= p.min_headway
        } else {
            -ds - closing_distance((n.v - me.v).max(0.0), p.edge_dt_s) >= p.min_headway
        }
    })
}

/// Greedy lane-keeping planner: reach the target velocity in the current
/// lane, change lanes only when a slower leader is in the way.
pub fn local_greedy_plan(me: &VehicleState, neighbors: &[VehicleState], p: &GreedyParams) -> Control {
    let src = ControlSource::Local;
    let vi = me.v_index();
    let target = me.target_index();
    let leader = nearest_ahead(me, neighbors, me.lane);

    let allowed = |dv: i32| {
        let v = me.lattice_velocity(vi + dv);
        if v < -1e-9 || v > p.max_speed + 1e-9 {
            return false;
        }
        match leader {
            None => true,
            Some(l) => {
                l.s - me.s - closing_distance((v - l.v).max(0.0), p.edge_dt_s) >= p.min_headway
            }
        }
    };
    let pick = |desired: i32| {
        for dv in (-1..=desired).rev() {
            if allowed(dv) {
                return Control::velocity(dv as i8, src);
            }
        }
        if me.lattice_velocity(vi - 1) >= -1e-9 {
            Control::decelerate(src)
        } else {
            Control::hold(src)
        }
    };

    let toward_target = (target - vi).signum();
    let Some(l) = leader else {
        return pick(toward_target);
    };
    if l.v >= me.lattice_target() - 1e-9 {
        return pick(toward_target);
    }
    if p.overtake_allowed {
        for dl in [1i64, -1] {
            let lane = me.lane as i64 + dl;
            if lane >= 0
                && lane < p.num_lanes as i64
                && lane_gap_ok(me, neighbors, lane as u32, p)
            {
                return Control::lane_change(dl as i8, src);
            }
        }
    }
    let desired = if me.v > l.v + 1e-9 {
        -1
    } else if me.v < l.v - 1e-9 && vi < target {
        1
    } else {
        0
    };
    pick(desired)
}

/// What a client checks before following an edge buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FollowParams {
    pub ticks_per_edge_step: u64,
    pub world_dt_ms: f64,
    pub staleness_threshold_ms: f64,
    pub num_lanes: u32,
    pub lane_width: f64,
    pub min_headway: f64,
}

impl FollowParams {
    pub fn from_setup(setup: &ClientSetup) -> Self {
        Self {
            ticks_per_edge_step: setup.clock.ticks_per_edge_step(),
            world_dt_ms: setup.clock.world_dt_ms(),
            staleness_threshold_ms: setup.staleness_threshold_ms,
            num_lanes: setup.num_lanes,
            lane_width: setup.lane_width,
            min_headway: setup.min_headway,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FollowError {
    #[error("planned speed implies a {dv:+} m/s change")]
    SpeedStep { dv: f64 },
    #[error("planned speed {planned} is off the vehicle's velocity lattice")]
    OffLattice { planned: f64 },
    #[error("waypoint implies a {dlane:+}-lane jump")]
    LaneStep { dlane: i64 },
    #[error("waypoint lane {0} is off the road")]
    LaneOutOfRange(i64),
    #[error("waypoint changes speed and lane in one step")]
    Combined,
    #[error("observed vehicle {neighbor} is {gap:.2} m away in the target lane")]
    HeadwayConflict { neighbor: u32, gap: f64 },
}

/// Control that moves the vehicle onto step `step` of `buffer`, after local
/// validation against the road and the observed neighbors.
pub fn follow_waypoints(
    buffer: &WaypointBuffer,
    step: usize,
    me: &VehicleState,
    neighbors: &[VehicleState],
    p: &FollowParams,
) -> Result<Control, FollowError> {
    let planned = buffer.planned_speeds[step];
    let dv = planned - me.v;
    let dv_step = dv.round();
    if dv_step.abs() > 1.0 {
        return Err(FollowError::SpeedStep { dv });
    }
    if (dv - dv_step).abs() > 1e-6 {
        return Err(FollowError::OffLattice { planned });
    }
    let lane = buffer.points[step].lane(p.lane_width);
    let dlane = lane - me.lane as i64;
    if dlane.abs() > 1 {
        return Err(FollowError::LaneStep { dlane });
    }
    if lane < 0 || lane >= p.num_lanes as i64 {
        return Err(FollowError::LaneOutOfRange(lane));
    }
    if dv_step != 0.0 && dlane != 0 {
        return Err(FollowError::Combined);
    }
    if let Some(n) = neighbors
        .iter()
        .find(|n| n.lane as i64 == lane && (n.s - me.s).abs() < p.min_headway)
    {
        return Err(FollowError::HeadwayConflict {
            neighbor: n.id,
            gap: (n.s - me.s).abs(),
        });
    }
    Ok(Control::new(dv_step as i8, dlane as i8, ControlSource::Edge).expect("checked above"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum BufferDecision {
    Follow(Control),
    /// The buffer covers this instant with a step planned before it could
    /// arrive; keep the current motion.
    Hold,
    Stale,
    Exhausted,
    Invalid(FollowError),
}

/// The client's rule for an active buffer at `now_tick`.
pub fn evaluate_buffer(
    buffer: &WaypointBuffer,
    now_tick: u64,
    me: &VehicleState,
    neighbors: &[VehicleState],
    p: &FollowParams,
) -> BufferDecision {
    if buffer.age_ms(now_tick, p.world_dt_ms) > p.staleness_threshold_ms + 1e-9 {
        return BufferDecision::Stale;
    }
    let j = buffer.step_index(now_tick, p.ticks_per_edge_step) as usize;
    if j < buffer.skipped_steps as usize {
        return BufferDecision::Hold;
    }
    if j >= buffer.points.len() {
        return BufferDecision::Exhausted;
    }
    match follow_waypoints(buffer, j, me, neighbors, p) {
        Ok(c) => BufferDecision::Follow(c),
        Err(e) => BufferDecision::Invalid(e),
    }
}

struct ActiveBuffer {
    buffer: WaypointBuffer,
    followed: bool,
}

fn busy_wait(d: Duration) {
    let start = Instant::now();
    while start.elapsed() < d {
        std::hint::spin_loop();
    }
}

/// One vehicle's control loop state.
pub struct VehicleClient {
    id: u32,
    setup: ClientSetup,
    greedy: GreedyParams,
    follow: FollowParams,
    expected_tick: u64,
    active: Option<ActiveBuffer>,
    newest_generation: Option<u64>,
    counters: ClientCounters,
    traffic: Vec<TrafficRecord>,
    rng: ChaCha8Rng,
}

impl VehicleClient {
    pub fn new(id: u32, setup: ClientSetup) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(setup.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(id as u64 + 1)));
        Self {
            id,
            greedy: GreedyParams::from_setup(&setup),
            follow: FollowParams::from_setup(&setup),
            setup,
            expected_tick: 0,
            active: None,
            newest_generation: None,
            counters: ClientCounters::default(),
            traffic: Vec::new(),
            rng,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn setup(&self) -> &ClientSetup {
        &self.setup
    }

    pub fn counters(&self) -> &ClientCounters {
        &self.counters
    }

    pub fn log(&self) -> ClientLog {
        ClientLog {
            client_id: self.id,
            traffic: self.traffic.clone(),
            counters: self.counters.clone(),
        }
    }

    pub fn into_log(self) -> ClientLog {
        ClientLog {
            client_id: self.id,
            traffic: self.traffic,
            counters: self.counters,
        }
    }

    /// Runs one control step. `processing_ms` excludes time spent waiting on
    /// pulls, which is reported as `network_ms`.
    pub fn step(
        &mut self,
        tick: u64,
        command: Command,
        port: &mut dyn PullPort,
    ) -> Result<ClientDone, ClientError> {
        if tick != self.expected_tick {
            return Err(ClientError::OutOfOrder {
                expected: self.expected_tick,
                got: tick,
            });
        }
        let started = Instant::now();
        let mut network = Duration::ZERO;

        let t = Instant::now();
        let sensing = match port.pull(tick, self.id, PullKind::Sensing)? {
            PullItem::Sensing(s) => s,
            _ => return Err(ClientError::MissingSensing(self.id)),
        };
        network += t.elapsed();
        let me = sensing.me;

        if command == Command::PullWaypointsAndTick
            && self.setup.mode == ClientMode::EdgeAssisted
            && !me.done
        {
            let t = Instant::now();
            let item = port.pull(tick, self.id, PullKind::Waypoints)?;
            network += t.elapsed();
            match item {
                PullItem::Waypoints(buffer) => self.receive(buffer),
                _ => self.counters.pull_not_available += 1,
            }
        }

        let control = if me.done {
            Control::hold(ControlSource::Local)
        } else {
            let neighbors = self.perceive(sensing.neighbors);
            let control = self.decide(tick, &me, &neighbors);
            match control.source() {
                ControlSource::Edge => self.counters.edge_ticks += 1,
                ControlSource::Local => self.counters.local_ticks += 1,
            }
            if self.counters.buffers_received > 0 {
                self.counters.edge_eligible_ticks += 1;
                if control.source() == ControlSource::Edge {
                    self.counters.edge_eligible_edge_ticks += 1;
                }
            }
            self.traffic
                .push(TrafficRecord::observe(tick, &me, control.source()));
            control
        };
        self.expected_tick += 1;
        if self.setup.step_work_ms > 0.0 {
            busy_wait(Duration::from_secs_f64(self.setup.step_work_ms / 1000.0));
        }

        let processing = started.elapsed().saturating_sub(network);
        Ok(ClientDone {
            control,
            timings: StepTimings {
                tick,
                client_id: self.id,
                processing_ms: processing.as_secs_f64() * 1000.0,
                network_ms: network.as_secs_f64() * 1000.0,
                barrier_ms: 0.0,
            },
        })
    }

    fn receive(&mut self, buffer: WaypointBuffer) {
        if self
            .newest_generation
            .is_some_and(|g| buffer.generation_tick <= g)
        {
            return;
        }
        self.newest_generation = Some(buffer.generation_tick);
        self.counters.buffers_received += 1;
        self.active = Some(ActiveBuffer {
            buffer,
            followed: false,
        });
    }

    fn perceive(&mut self, mut neighbors: Vec<VehicleState>) -> Vec<VehicleState> {
        let noise = self.setup.speed_estimate_noise;
        if noise > 0.0 {
            for n in &mut neighbors {
                n.v = (n.v + self.rng.gen_range(-noise..=noise)).max(0.0);
            }
        }
        neighbors
    }

    fn decide(&mut self, tick: u64, me: &VehicleState, neighbors: &[VehicleState]) -> Control {
        if let Some(active) = self.active.as_mut() {
            match evaluate_buffer(&active.buffer, tick, me, neighbors, &self.follow) {
                BufferDecision::Follow(c) => {
                    if !active.followed {
                        active.followed = true;
                        self.counters.buffers_followed += 1;
                        *self
                            .counters
                            .compensation_steps
                            .entry(active.buffer.skipped_steps)
                            .or_default() += 1;
                    }
                    return c;
                }
                BufferDecision::Hold => return Control::hold(ControlSource::Edge),
                BufferDecision::Stale => {
                    self.counters.staleness_fallbacks += 1;
                    self.active = None;
                }
                BufferDecision::Exhausted => {
                    self.counters.exhausted_buffers += 1;
                    self.active = None;
                }
                BufferDecision::Invalid(e) => {
                    log::debug!("vehicle {} discards buffer: {e}", self.id);
                    self.counters.validation_failures += 1;
                    self.active = None;
                }
            }
        }
        local_greedy_plan(me, neighbors, &self.greedy)
    }
}

struct TcpPort<'a> {
    reader: &'a mut FrameReader<BufReader<TcpStream>>,
    writer: &'a mut FrameWriter<TcpStream>,
}

impl PullPort for TcpPort<'_> {
    fn pull(&mut self, tick: u64, vehicle_id: u32, kind: PullKind) -> Result<PullItem, ProtocolError> {
        self.writer.send(&Envelope::new(
            tick,
            vehicle_id,
            Body::PullRequest(PullRequest { vehicle_id, kind }),
        ))?;
        let reply = self.reader.expect_frame()?;
        match reply.body {
            Body::PullReply(r) => Ok(r.item),
            Body::Error(e) => Err(ProtocolError::Remote {
                code: e.code,
                message: e.message,
            }),
            other => Err(ProtocolError::Unexpected {
                expected: "PULL_REPLY",
                got: other.type_name().to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub manager: String,
    pub vehicle_index: u32,
    /// How long to keep retrying the initial connection.
    pub connect_timeout: Duration,
}

/// Outcome of a finished remote client.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub vehicle_id: u32,
    pub ticks: u64,
    pub counters: ClientCounters,
}

fn connect(opts: &ClientOptions) -> Result<TcpStream, ClientError> {
    let deadline = Instant::now() + opts.connect_timeout;
    loop {
        match TcpStream::connect(&opts.manager) {
            Ok(s) => return Ok(s),
            Err(e)
                if Instant::now() < deadline
                    && matches!(
                        e.kind(),
                        ErrorKind::ConnectionRefused | ErrorKind::NotFound | ErrorKind::AddrNotAvailable
                    ) =>
            {
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(source) => {
                return Err(ClientError::Connect {
                    addr: opts.manager.clone(),
                    source,
                })
            }
        }
    }
}

/// Connects to a manager, registers, and runs the control loop until END.
pub fn run_client(opts: &ClientOptions) -> Result<ClientReport, ClientError> {
    let stream = connect(opts)?;
    stream.set_nodelay(true).ok();
    let mut reader = FrameReader::new(BufReader::new(stream.try_clone().map_err(ProtocolError::Io)?));
    let mut writer = FrameWriter::new(stream);

    writer.send(&Envelope::new(
        0,
        opts.vehicle_index,
        Body::Register(Register {
            client_kind: ClientKind::Vehicle,
            requested_vehicle_index: opts.vehicle_index,
        }),
    ))?;
    let ack = match reader.expect_frame()?.body {
        Body::RegisterAck(ack) => ack,
        Body::Error(e) => {
            return Err(ClientError::Rejected {
                code: e.code,
                message: e.message,
            })
        }
        other => {
            return Err(ProtocolError::Unexpected {
                expected: "REGISTER_ACK",
                got: other.type_name().to_string(),
            }
            .into())
        }
    };
    let id = ack.assigned_id;
    let mut client = VehicleClient::new(id, ack.setup);

    loop {
        let frame = reader.expect_frame()?;
        let tick = frame.tick;
        match frame.body {
            Body::TickCmd(cmd) if cmd.command == Command::End => {
                let log = client.log();
                writer.send(&Envelope::new(tick, id, Body::End(Box::new(log))))?;
                return Ok(ClientReport {
                    vehicle_id: id,
                    ticks: client.expected_tick,
                    counters: client.counters.clone(),
                });
            }
            Body::TickCmd(cmd) => {
                let mut port = TcpPort {
                    reader: &mut reader,
                    writer: &mut writer,
                };
                let done = match client.step(tick, cmd.command, &mut port) {
                    Ok(done) => done,
                    Err(e) => {
                        let code = match e {
                            ClientError::OutOfOrder { .. } => ErrorCode::OutOfOrder,
                            _ => ErrorCode::Protocol,
                        };
                        writer
                            .send(&Envelope::new(tick, id, Body::Error(crate::protocol::ErrorPayload {
                                code,
                                message: e.to_string(),
                            })))
                            .ok();
                        return Err(e);
                    }
                };
                writer.send(&Envelope::new(tick, id, Body::ClientDone(done)))?;
            }
            Body::Error(e) => {
                return Err(ProtocolError::Remote {
                    code: e.code,
                    message: e.message,
                }
                .into())
            }
            other => {
                return Err(ProtocolError::Unexpected {
                    expected: "TICK_CMD",
                    got: other.type_name().to_string(),
                }
                .into())
            }
        }
    }
}
