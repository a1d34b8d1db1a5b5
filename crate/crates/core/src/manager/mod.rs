//! Simulation manager: registration, the lockstep tick loop, barrier,
//! edge scheduling with time reconciliation, and end-of-run collection.

pub mod driver;
pub mod events;
pub mod pool;

use std::collections::{BTreeSet, VecDeque};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimClock;
use crate::config::{DisconnectPolicy, EdgeAlgorithm, ScenarioConfig};
use crate::edge::EdgeParams;
use crate::metrics::{
    aggregate, emit_csv, emit_plots, MetricsBundle, MetricsCollector, OutputError, RunArtifacts,
    RunSummary, SafetyEvent, StepTimings, WorldStepRecord,
};
use crate::netmodel::Channel;
use crate::protocol::{ClientMode, ClientSetup, Command};
use crate::types::{lane_center, Position, VehicleState, WaypointBuffer};
use crate::units::kph_to_mps;
use crate::v2x::{Collector, Key, PayloadKind};
use crate::world::{World, WorldError};

use driver::{DriverConfig, EdgeDriver, EdgeJob, JobResult, VehicleProfile};
use events::{Event, EventKind, EventLog, EVENT_LOG_FILE};
use pool::{ClientPool, PoolError, PullServer, RemotePool, SensingFrame, SequentialPool};

pub use pool::{DirectPort, Reply, TickResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunPhase {
    Registration,
    Running,
    Draining,
    Finished,
}

/// Tick at which an edge output generated at `generation_tick` becomes
/// visible. Never earlier than the next tick.
pub fn schedule_delivery(
    generation_tick: u64,
    runtime_ms: f64,
    latency_ms: f64,
    clock: &SimClock,
    ideal: bool,
) -> u64 {
    assert!(runtime_ms >= 0.0 && latency_ms >= 0.0, "negative duration");
    if ideal {
        return generation_tick + 1;
    }
    (generation_tick + clock.ticks_for_ms(runtime_ms + latency_ms)).max(generation_tick + 1)
}

/// Where the vehicle clients run.
#[derive(Debug, Clone, PartialEq)]
pub enum Placement {
    /// In this process, stepped one after another.
    Sequential,
    /// Child processes running `program args... spawn-client ...`.
    LocalProcesses { program: PathBuf, args: Vec<String> },
    /// Wait for clients started elsewhere.
    Remote,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub placement: Placement,
    pub ideal_edge: bool,
    pub sync_edge: bool,
    pub continue_on_dropout: bool,
    pub seed: Option<u64>,
    pub port: Option<u16>,
    pub algorithm: Option<EdgeAlgorithm>,
    pub run_id: String,
    pub bind_ip: IpAddr,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            placement: Placement::Sequential,
            ideal_edge: false,
            sync_edge: false,
            continue_on_dropout: false,
            seed: None,
            port: None,
            algorithm: None,
            run_id: "run".into(),
            bind_ip: IpAddr::V4(Ipv4Addr::LOCALHOST),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("cannot start client process: {0}")]
    Spawn(std::io::Error),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub bundle: MetricsBundle,
    pub summary: RunSummary,
    pub status: RunStatus,
    pub events: Vec<Event>,
}

/// A scenario with its listening socket open, ready to run.
pub struct BoundManager {
    config: ScenarioConfig,
    opts: RunOptions,
    listener: Option<TcpListener>,
}

/// Opens the client port (if clients are remote) without starting the run.
pub fn bind(mut config: ScenarioConfig, opts: RunOptions) -> Result<BoundManager, RunError> {
    if let Some(seed) = opts.seed {
        config.world.seed = seed;
    }
    if let Some(a) = opts.algorithm {
        config.edge_base.algorithm = a;
    }
    if opts.continue_on_dropout {
        config.world.on_disconnect = DisconnectPolicy::Continue;
    }
    config
        .validate()
        .map_err(|e| RunError::Setup(format!("invalid scenario: {e}")))?;
    let listener = match opts.placement {
        Placement::Sequential => None,
        Placement::LocalProcesses { .. } | Placement::Remote => {
            let port = match (&opts.placement, opts.port) {
                (_, Some(p)) => p,
                (Placement::LocalProcesses { .. }, None) => 0,
                _ => config.world.client_port,
            };
            let addr = SocketAddr::new(opts.bind_ip, port);
            Some(TcpListener::bind(addr).map_err(|source| RunError::Bind { addr, source })?)
        }
    };
    Ok(BoundManager {
        config,
        opts,
        listener,
    })
}

pub fn run_scenario(config: ScenarioConfig, opts: RunOptions) -> Result<RunOutcome, RunError> {
    bind(config, opts)?.run()
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

struct PendingJob {
    generation_tick: u64,
    progress: Arc<AtomicU64>,
}

/// Tick-loop state for the edge side.
struct EdgeSide {
    driver: EdgeDriver,
    pending: VecDeque<PendingJob>,
    deliveries: BTreeSet<u64>,
    lower_bound_ms: f64,
    failures: u64,
}

impl EdgeSide {
    fn process(&mut self, result: JobResult, tick: u64, waypoints: &Collector<WaypointBuffer>, events: &EventLog) {
        self.pending.pop_front();
        match result {
            JobResult::Done {
                generation_tick,
                buffers,
            } => {
                for b in buffers {
                    if b.delivery_tick < tick {
                        log::warn!(
                            "buffer for vehicle {} (g={generation_tick}) reconciled after its delivery tick {}",
                            b.vehicle_id,
                            b.delivery_tick
                        );
                    }
                    events.record(
                        tick,
                        EventKind::EdgeDeposit,
                        Some(b.vehicle_id),
                        format!("generation={generation_tick} delivery={}", b.delivery_tick),
                    );
                    self.deliveries.insert(b.delivery_tick);
                    let key = Key::new(b.vehicle_id, PayloadKind::Waypoints);
                    let delivery = b.delivery_tick;
                    waypoints.deposit_at(key, b, generation_tick, delivery);
                }
            }
            JobResult::Failed {
                generation_tick,
                message,
            } => {
                self.failures += 1;
                events.record(
                    tick,
                    EventKind::EdgeFailure,
                    None,
                    format!("generation={generation_tick}: {message}"),
                );
            }
        }
    }

    fn lower_bound(&self, job: &PendingJob, clock: &SimClock, ideal: bool) -> u64 {
        if ideal {
            return job.generation_tick + 1;
        }
        let progress_ms = job.progress.load(Ordering::Acquire) as f64 / 1000.0;
        job.generation_tick + clock.ticks_for_ms(progress_ms + self.lower_bound_ms).max(1)
    }

    /// Takes in every job whose output could be visible at `tick`; returns the
    /// time spent blocked.
    fn reconcile(
        &mut self,
        tick: u64,
        clock: &SimClock,
        ideal: bool,
        wait_all: bool,
        waypoints: &Collector<WaypointBuffer>,
        events: &EventLog,
    ) -> f64 {
        let mut waited = 0.0;
        loop {
            while let Ok(r) = self.driver.results.try_recv() {
                self.process(r, tick, waypoints, events);
            }
            let needed = wait_all && !self.pending.is_empty()
                || self
                    .pending
                    .iter()
                    .any(|j| j.generation_tick < tick && self.lower_bound(j, clock, ideal) <= tick);
            if !needed {
                return waited;
            }
            let t0 = Instant::now();
            match self.driver.results.recv() {
                Ok(r) => {
                    waited += ms(t0.elapsed());
                    self.process(r, tick, waypoints, events);
                }
                Err(_) => {
                    self.failures += self.pending.len() as u64;
                    events.record(tick, EventKind::EdgeFailure, None, "edge driver stopped");
                    self.pending.clear();
                    return waited;
                }
            }
        }
    }
}

fn client_setups(config: &ScenarioConfig, clock: SimClock) -> Vec<ClientSetup> {
    let mode = if config.edge_base.algorithm == EdgeAlgorithm::None {
        ClientMode::LocalGreedy
    } else {
        ClientMode::EdgeAssisted
    };
    config
        .vehicles
        .iter()
        .map(|v| ClientSetup {
            clock,
            mode,
            num_lanes: config.world.lanes,
            lane_width: config.world.lane_width,
            min_headway: config.world.min_headway,
            lookahead_m: config.world.lookahead_m,
            max_speed: kph_to_mps(v.behavior.max_speed).unwrap_or(0.0),
            overtake_allowed: v.behavior.overtake_allowed,
            staleness_threshold_ms: config.edge_base.staleness_threshold_ms,
            speed_estimate_noise: v.behavior.speed_estimate_noise,
            step_work_ms: v.behavior.step_work_ms,
            seed: config.world.seed,
        })
        .collect()
}

fn position_of(s: &VehicleState, lane_width: f64) -> Position {
    Position::new(s.s, lane_center(s.lane, lane_width))
}

struct Children(Vec<Child>);

impl Children {
    fn failure(&mut self) -> Option<String> {
        for c in &mut self.0 {
            if let Ok(Some(status)) = c.try_wait() {
                if !status.success() {
                    return Some(format!("client process {} exited with {status}", c.id()));
                }
            }
        }
        None
    }

    fn reap(&mut self, grace: Duration) -> Vec<String> {
        let deadline = Instant::now() + grace;
        let mut notes = Vec::new();
        for c in &mut self.0 {
            loop {
                match c.try_wait() {
                    Ok(Some(status)) => {
                        if !status.success() {
                            notes.push(format!("client process {} exited with {status}", c.id()));
                        }
                        break;
                    }
                    Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(10)),
                    _ => {
                        c.kill().ok();
                        c.wait().ok();
                        notes.push(format!("client process {} killed after END", c.id()));
                        break;
                    }
                }
            }
        }
        notes
    }
}

impl Drop for Children {
    fn drop(&mut self) {
        for c in &mut self.0 {
            if matches!(c.try_wait(), Ok(None)) {
                c.kill().ok();
                c.wait().ok();
            }
        }
    }
}

impl BoundManager {
    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.listener.as_ref().and_then(|l| l.local_addr().ok())
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn run(self) -> Result<RunOutcome, RunError> {
        let BoundManager {
            config,
            opts,
            listener,
        } = self;
        let clock = config.clock();
        let topology = config.topology();
        let spawns = config.spawns();
        let seed = config.world.seed;
        let mut world = World::spawn(clock, topology.clone(), &spawns, seed)?;
        let events = EventLog::new();
        let waypoints: Arc<Collector<WaypointBuffer>> = Arc::new(Collector::new());
        let uplink_log: Arc<Collector<VehicleState>> = Arc::new(Collector::new());
        let server = Arc::new(PullServer::new(
            Arc::clone(&waypoints),
            config.world.lookahead_m,
            events.clone(),
        ));
        server.publish(SensingFrame {
            tick: 0,
            states: world.states(),
        });
        let model = config.network.model;
        let uplink = Channel::new(model, seed ^ 0x5555_5555_5555_5555)
            .map_err(|e| RunError::Setup(e.to_string()))?;
        let edge_position = config.edge_position();
        let barrier_timeout = Duration::from_secs_f64(config.world.barrier_timeout_s);
        let setups = client_setups(&config, clock);
        let n = setups.len();

        let mut children = Children(Vec::new());
        let mut pool: Box<dyn ClientPool> = match (&opts.placement, listener) {
            (Placement::Sequential, _) => Box::new(SequentialPool::new(setups, Arc::clone(&server), events.clone())),
            (placement, Some(listener)) => {
                let addr = listener.local_addr().map_err(RunError::Spawn)?;
                let mut remote = RemotePool::start(
                    listener,
                    setups,
                    Arc::clone(&server),
                    events.clone(),
                    config.world.on_disconnect,
                )
                .map_err(RunError::Spawn)?;
                if let Placement::LocalProcesses { program, args } = placement {
                    let target = SocketAddr::new(
                        if addr.ip().is_unspecified() {
                            IpAddr::V4(Ipv4Addr::LOCALHOST)
                        } else {
                            addr.ip()
                        },
                        addr.port(),
                    );
                    for i in 0..n {
                        let child = Process::new(program)
                            .args(args)
                            .arg("spawn-client")
                            .arg("--manager")
                            .arg(target.to_string())
                            .arg("--vehicle-index")
                            .arg(i.to_string())
                            .stdin(Stdio::null())
                            .stdout(Stdio::null())
                            .spawn()
                            .map_err(RunError::Spawn)?;
                        children.0.push(child);
                    }
                }
                remote.wait_registered(barrier_timeout, &mut || children.failure())?;
                Box::new(remote)
            }
            (_, None) => return Err(RunError::Setup("no listening socket".into())),
        };
        let expected_ids = pool.active();

        let algorithm = config.edge_base.algorithm;
        let mut edge = if algorithm == EdgeAlgorithm::None {
            None
        } else {
            let params = EdgeParams {
                algorithm,
                clock,
                topology: topology.clone(),
                cluster_capacity: config.edge_base.cluster_capacity,
                cluster_on_target_velocity: config.edge_base.cluster_on_target_velocity,
                max_expansions: config.edge_base.max_expansions,
                timeout_ms: config.planner_timeout_ms(),
                inject_delay_ms: config.edge_base.inject_delay_ms,
                runtime_clock: config.edge_base.runtime_clock,
                staleness_threshold_ms: config.edge_base.staleness_threshold_ms,
                lookahead_m: config.world.lookahead_m,
            };
            let profiles = spawns
                .iter()
                .zip(&config.vehicles)
                .map(|(s, v)| VehicleProfile {
                    id: s.id,
                    max_speed: s.max_speed,
                    lane_changes: v.behavior.overtake_allowed,
                })
                .collect();
            let driver = EdgeDriver::spawn(DriverConfig {
                params,
                profiles,
                uplink: Arc::clone(&uplink_log),
                downlink: Channel::new(model, seed ^ 0xaaaa_aaaa_aaaa_aaaa)
                    .map_err(|e| RunError::Setup(e.to_string()))?,
                model,
                edge_position,
                ideal: opts.ideal_edge,
            })
            .map_err(RunError::Spawn)?;
            Some(EdgeSide {
                driver,
                pending: VecDeque::new(),
                deliveries: BTreeSet::new(),
                lower_bound_ms: model.lower_bound_ms(),
                failures: 0,
            })
        };

        let mut bundle = MetricsBundle {
            run_id: opts.run_id.clone(),
            algorithm: algorithm.as_str().to_string(),
            world_dt_s: clock.world_dt_s,
            edge_dt_s: clock.edge_dt_s,
            n_vehicles: n,
            ..MetricsBundle::default()
        };

        for t in 0..config.world.max_ticks {
            if world.all_done() {
                break;
            }
            let states = world.states();
            for s in states.iter().filter(|s| !s.done) {
                let latency = if opts.ideal_edge {
                    0.0
                } else {
                    uplink.sample(position_of(s, topology.lane_width), edge_position)
                };
                uplink_log.deposit(Key::new(s.id, PayloadKind::VehicleState), *s, t, latency, &clock);
            }

            let mut edge_wait_ms = 0.0;
            let mut command = Command::Tick;
            if let Some(side) = edge.as_mut() {
                if clock.is_edge_boundary(t) {
                    let progress = Arc::new(AtomicU64::new(0));
                    events.record(t, EventKind::EdgeJob, None, format!("generation={t}"));
                    if side.driver.submit(EdgeJob {
                        generation_tick: t,
                        progress: Arc::clone(&progress),
                    }) {
                        side.pending.push_back(PendingJob {
                            generation_tick: t,
                            progress,
                        });
                    }
                }
                edge_wait_ms = side.reconcile(t, &clock, opts.ideal_edge, opts.sync_edge, &waypoints, &events);
                if side.deliveries.contains(&t) {
                    command = Command::PullWaypointsAndTick;
                }
            }

            server.publish(SensingFrame { tick: t, states });
            let result = match pool.step(t, command, barrier_timeout) {
                Ok(r) => r,
                Err(e) => {
                    log::error!("{e}");
                    bundle.partial = true;
                    bundle.notes.push(e.to_string());
                    break;
                }
            };
            bundle.duplicate_done += result.duplicates;
            for id in &result.dropped {
                bundle.notes.push(format!("client {id} dropped out at tick {t}"));
                bundle.partial = true;
            }
            for reply in &result.replies {
                if let Err(e) = world.apply_control(reply.id, reply.done.control) {
                    log::warn!("control from {} rejected: {e}", reply.id);
                }
                let mut timing: StepTimings = reply.done.timings;
                let client_ms = timing.processing_ms + timing.network_ms;
                let transit = ms(reply.arrival.saturating_duration_since(reply.sent)) - client_ms;
                timing.tick = t;
                timing.client_id = reply.id;
                timing.network_ms += transit.max(0.0);
                timing.barrier_ms = ms(result.released.saturating_duration_since(reply.arrival));
                bundle.timings.push(timing);
            }
            let w0 = Instant::now();
            let report = world.tick();
            let world_step_ms = ms(w0.elapsed());
            events.record(t, EventKind::WorldTick, None, "");
            bundle.safety.extend(SafetyEvent::from_report(&report));
            bundle.world_steps.push(WorldStepRecord {
                tick: t,
                world_step_ms,
                edge_wait_ms,
            });
        }

        let end_tick = world.tick_index();
        let logs = pool.finish(end_tick, barrier_timeout);
        drop(pool);
        bundle.notes.extend(children.reap(Duration::from_secs(5)));

        let mut collector = MetricsCollector::new(expected_ids, edge.is_some());
        for log in logs {
            if let Err(e) = collector.accept_client(log) {
                log::warn!("{e}");
            }
        }
        if let Some(side) = edge.take() {
            bundle.edge_failures = side.failures;
            match side.driver.finish() {
                Some(edge_log) => {
                    events.record(end_tick, EventKind::MetricsUpload, None, "edge");
                    collector.accept_edge(edge_log).ok();
                }
                None => bundle.notes.push("edge driver did not return its log".into()),
            }
        }
        let (clients, edge_log, missing) = collector.into_parts();
        if !missing.is_empty() {
            bundle.partial = true;
            bundle.notes.push(format!("missing metric uploads: {missing:?}"));
        }
        bundle.clients = clients;
        bundle.edge = edge_log;
        bundle.ticks = bundle.world_steps.len() as u64;
        bundle.ignored_controls = world.ignored_controls();

        let summary = aggregate(&bundle);
        Ok(RunOutcome {
            status: if bundle.partial {
                RunStatus::Partial
            } else {
                RunStatus::Complete
            },
            summary,
            bundle,
            events: events.snapshot(),
        })
    }
}

pub const CONFIG_COPY: &str = "config.yaml";

/// Writes config copy, event log, CSVs, summary and plots into `dir`.
pub fn write_run_dir(outcome: &RunOutcome, config_yaml: &str, dir: &Path) -> Result<PathBuf, OutputError> {
    let werr = |path: PathBuf| move |source| OutputError::Write { path, source };
    std::fs::create_dir_all(dir).map_err(werr(dir.to_path_buf()))?;
    let cfg = dir.join(CONFIG_COPY);
    std::fs::write(&cfg, config_yaml).map_err(werr(cfg.clone()))?;
    let log_path = dir.join(EVENT_LOG_FILE);
    let mut out = String::new();
    for e in &outcome.events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    std::fs::write(&log_path, out).map_err(werr(log_path.clone()))?;
    let artifacts = RunArtifacts::from_bundle(&outcome.bundle);
    emit_csv(&artifacts, dir)?;
    emit_plots(&[artifacts], dir)?;
    Ok(dir.to_path_buf())
}
