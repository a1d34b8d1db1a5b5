//! Edge driver thread: runs planner jobs in submission order and stamps
//! delivery ticks on their buffers.

use std::panic::AssertUnwindSafe;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{Receiver, Sender};

use crate::edge::{compensation_steps, edge_run_step, EdgeParams, PlannerInput, PlannerVehicle};
use crate::metrics::EdgeLog;
use crate::netmodel::{Channel, LatencyModel};
use crate::types::{lane_center, Position, VehicleState, WaypointBuffer};
use crate::v2x::{Collector, Key, PayloadKind};

use super::schedule_delivery;

pub struct EdgeJob {
    pub generation_tick: u64,
    pub progress: Arc<AtomicU64>,
}

pub enum JobResult {
    Done {
        generation_tick: u64,
        buffers: Vec<WaypointBuffer>,
    },
    Failed {
        generation_tick: u64,
        message: String,
    },
}

/// Per-vehicle facts the edge knows from the scenario.
#[derive(Debug, Clone, Copy)]
pub struct VehicleProfile {
    pub id: u32,
    pub max_speed: f64,
    pub lane_changes: bool,
}

pub struct DriverConfig {
    pub params: EdgeParams,
    pub profiles: Vec<VehicleProfile>,
    pub uplink: Arc<Collector<VehicleState>>,
    pub downlink: Channel,
    pub model: LatencyModel,
    pub edge_position: Position,
    pub ideal: bool,
}

pub struct EdgeDriver {
    jobs: Option<Sender<EdgeJob>>,
    pub results: Receiver<JobResult>,
    handle: Option<JoinHandle<EdgeLog>>,
}

fn position(s: f64, lane: u32, lane_width: f64) -> Position {
    Position::new(s, lane_center(lane, lane_width))
}

impl EdgeDriver {
    pub fn spawn(config: DriverConfig) -> std::io::Result<Self> {
        let (job_tx, job_rx) = crossbeam_channel::unbounded::<EdgeJob>();
        let (res_tx, res_rx) = crossbeam_channel::unbounded();
        let handle = std::thread::Builder::new()
            .name("edge".into())
            .spawn(move || drive(config, job_rx, res_tx))?;
        Ok(Self {
            jobs: Some(job_tx),
            results: res_rx,
            handle: Some(handle),
        })
    }

    pub fn submit(&self, job: EdgeJob) -> bool {
        self.jobs.as_ref().is_some_and(|tx| tx.send(job).is_ok())
    }

    /// Stops accepting jobs, lets queued ones finish, and returns the log.
    pub fn finish(mut self) -> Option<EdgeLog> {
        self.jobs.take();
        self.handle.take().and_then(|h| h.join().ok())
    }
}

fn drive(cfg: DriverConfig, jobs: Receiver<EdgeJob>, results: Sender<JobResult>) -> EdgeLog {
    let mut log = EdgeLog::default();
    let mut previous: Vec<WaypointBuffer> = Vec::new();
    let clock = cfg.params.clock;
    let lane_width = cfg.params.topology.lane_width;
    for job in jobs {
        let g = job.generation_tick;
        let vehicles: Vec<PlannerVehicle> = cfg
            .profiles
            .iter()
            .filter_map(|p| {
                let item = cfg.uplink.fetch_latest(Key::new(p.id, PayloadKind::VehicleState), g)?;
                let mut state = item.payload;
                if state.done {
                    return None;
                }
                state.s += state.v * (g - item.produced_tick) as f64 * clock.world_dt_s;
                Some(PlannerVehicle {
                    state,
                    max_speed: p.max_speed,
                    lane_changes: p.lane_changes,
                })
            })
            .collect();
        let skipped = if cfg.ideal {
            1
        } else {
            let worst = vehicles
                .iter()
                .map(|v| {
                    let d = cfg
                        .edge_position
                        .distance_m(&position(v.state.s, v.state.lane, lane_width));
                    cfg.model.expected_ms(d)
                })
                .fold(cfg.model.expected_ms(0.0), f64::max);
            compensation_steps(&clock, worst)
        };
        previous.retain(|b| b.age_ms(g, clock.world_dt_ms()) <= cfg.params.staleness_threshold_ms);
        let input = PlannerInput {
            generation_tick: g,
            vehicles,
            previous: previous.clone(),
            skipped_steps: skipped,
        };
        let params = &cfg.params;
        let progress = Arc::clone(&job.progress);
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
            edge_run_step(&input, params, Some(&progress))
        }));
        let msg = match outcome {
            Ok(mut out) => {
                let runtime = out.metrics.runtime_ms;
                for b in &mut out.buffers {
                    let latency = cfg.downlink.sample(
                        cfg.edge_position,
                        position(b.origin.s, b.origin.lane, lane_width),
                    );
                    b.delivery_tick = schedule_delivery(g, runtime, latency, &clock, cfg.ideal);
                }
                out.metrics.min_delivery_tick = out.buffers.iter().map(|b| b.delivery_tick).min();
                out.metrics.max_delivery_tick = out.buffers.iter().map(|b| b.delivery_tick).max();
                log.invocations.push(out.metrics);
                previous.extend(out.buffers.iter().cloned());
                JobResult::Done {
                    generation_tick: g,
                    buffers: out.buffers,
                }
            }
            Err(panic) => {
                let message = panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "edge planner panicked".into());
                JobResult::Failed {
                    generation_tick: g,
                    message,
                }
            }
        };
        if results.send(msg).is_err() {
            break;
        }
    }
    log
}
