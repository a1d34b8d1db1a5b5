//! Metric capture, end-of-run collection and aggregation.
//!
//! Clients and the edge keep their logs locally and upload them once, after
//! the run ends. The manager merges uploads with its own timing and safety
//! records into a [`MetricsBundle`] and reduces that to a [`RunSummary`].

mod output;
mod plot;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{ControlSource, VehicleState};
use crate::units::mps_to_kph;
use crate::world::SafetyReport;

pub use output::{emit_csv, load_run, OutputError, RunArtifacts, CSV_FILES};
pub use plot::{emit_plots, PLOT_FILES};

/// Mean deviation (m/s) a run must reach to count as "at target".
pub const DEVIATION_BAND_MPS: f64 = 0.5;

/// Per-client per-tick step time decomposition, milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub tick: u64,
    pub client_id: u32,
    pub processing_ms: f64,
    pub network_ms: f64,
    pub barrier_ms: f64,
}

impl StepTimings {
    pub fn total_ms(&self) -> f64 {
        self.processing_ms + self.network_ms + self.barrier_ms
    }
}

/// One vehicle observed at one tick, with the source of the control it chose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficRecord {
    pub tick: u64,
    pub vehicle_id: u32,
    pub v: f64,
    pub v_target: f64,
    pub deviation: f64,
    pub lane: u32,
    pub s: f64,
    pub source: ControlSource,
}

impl TrafficRecord {
    pub fn observe(tick: u64, state: &VehicleState, source: ControlSource) -> Self {
        Self {
            tick,
            vehicle_id: state.id,
            v: state.v,
            v_target: state.v_target,
            deviation: state.deviation(),
            lane: state.lane,
            s: state.s,
            source,
        }
    }
}

/// Client-side event counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientCounters {
    /// Distinct edge buffers pulled.
    pub buffers_received: u64,
    /// Buffers that produced at least one EDGE control.
    pub buffers_followed: u64,
    pub staleness_fallbacks: u64,
    pub validation_failures: u64,
    pub exhausted_buffers: u64,
    pub pull_not_available: u64,
    pub edge_ticks: u64,
    pub local_ticks: u64,
    /// Ticks at which an edge buffer had been delivered and the vehicle was
    /// still driving.
    pub edge_eligible_ticks: u64,
    pub edge_eligible_edge_ticks: u64,
    /// Skipped-step count of every followed buffer, as a histogram.
    #[serde(deserialize_with = "int_keyed")]
    pub compensation_steps: BTreeMap<u32, u64>,
}

/// JSON object keys arrive as strings, and buffered (tagged) payloads do not
/// coerce them back to integers on their own.
fn int_keyed<'de, D>(d: D) -> Result<BTreeMap<u32, u64>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    use serde::de::Error;
    BTreeMap::<String, u64>::deserialize(d)?
        .into_iter()
        .map(|(k, v)| k.parse().map(|k| (k, v)).map_err(D::Error::custom))
        .collect()
}

impl ClientCounters {
    pub fn merge(&mut self, other: &ClientCounters) {
        self.buffers_received += other.buffers_received;
        self.buffers_followed += other.buffers_followed;
        self.staleness_fallbacks += other.staleness_fallbacks;
        self.validation_failures += other.validation_failures;
        self.exhausted_buffers += other.exhausted_buffers;
        self.pull_not_available += other.pull_not_available;
        self.edge_ticks += other.edge_ticks;
        self.local_ticks += other.local_ticks;
        self.edge_eligible_ticks += other.edge_eligible_ticks;
        self.edge_eligible_edge_ticks += other.edge_eligible_edge_ticks;
        for (k, v) in &other.compensation_steps {
            *self.compensation_steps.entry(*k).or_default() += v;
        }
    }
}

/// A client's batched upload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientLog {
    pub client_id: u32,
    pub traffic: Vec<TrafficRecord>,
    pub counters: ClientCounters,
}

/// One edge invocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeMetrics {
    pub generation_tick: u64,
    pub algorithm: String,
    pub n_vehicles: usize,
    pub cluster_sizes: Vec<usize>,
    /// Runtime charged to the invocation by the configured runtime clock.
    pub runtime_ms: f64,
    pub wall_ms: f64,
    pub cpu_ms: f64,
    pub expanded_nodes: u64,
    pub plan_violations: usize,
    pub infeasible_clusters: usize,
    pub capped_clusters: usize,
    pub timeout: bool,
    pub compensation_steps: u32,
    pub buffers: usize,
    pub min_delivery_tick: Option<u64>,
    pub max_delivery_tick: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeLog {
    pub invocations: Vec<EdgeMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldStepRecord {
    pub tick: u64,
    pub world_step_ms: f64,
    /// Time the world loop spent waiting for edge output before this tick.
    pub edge_wait_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyKind {
    Headway,
    Collision,
    Lane,
    Blockage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyEvent {
    pub tick: u64,
    pub kind: SafetyKind,
    pub vehicle_a: u32,
    pub vehicle_b: Option<u32>,
    pub value: f64,
}

impl SafetyEvent {
    pub fn from_report(report: &SafetyReport) -> Vec<SafetyEvent> {
        let mut out = Vec::new();
        for h in &report.headway_violations {
            out.push(SafetyEvent {
                tick: report.tick,
                kind: SafetyKind::Headway,
                vehicle_a: h.follower,
                vehicle_b: Some(h.leader),
                value: h.gap,
            });
        }
        for (a, b) in &report.collisions {
            out.push(SafetyEvent {
                tick: report.tick,
                kind: SafetyKind::Collision,
                vehicle_a: *a,
                vehicle_b: Some(*b),
                value: 0.0,
            });
        }
        for (id, lane) in &report.lane_violations {
            out.push(SafetyEvent {
                tick: report.tick,
                kind: SafetyKind::Lane,
                vehicle_a: *id,
                vehicle_b: None,
                value: *lane as f64,
            });
        }
        for id in &report.blockages {
            out.push(SafetyEvent {
                tick: report.tick,
                kind: SafetyKind::Blockage,
                vehicle_a: *id,
                vehicle_b: None,
                value: 0.0,
            });
        }
        out
    }
}

/// Who uploaded a batched log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Uploader {
    Client(u32),
    Edge,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CollectError {
    #[error("{0:?} already uploaded its metrics; keeping the first upload")]
    Duplicate(Uploader),
    #[error("upload from unexpected {0:?}")]
    Unexpected(Uploader),
}

/// Accepts exactly one upload per expected entity.
#[derive(Debug, Clone, Default)]
pub struct MetricsCollector {
    expected_clients: BTreeSet<u32>,
    expect_edge: bool,
    clients: BTreeMap<u32, ClientLog>,
    edge: Option<EdgeLog>,
    rejected: u64,
}

impl MetricsCollector {
    pub fn new(expected_clients: impl IntoIterator<Item = u32>, expect_edge: bool) -> Self {
        Self {
            expected_clients: expected_clients.into_iter().collect(),
            expect_edge,
            ..Self::default()
        }
    }

    pub fn accept_client(&mut self, log: ClientLog) -> Result<(), CollectError> {
        let who = Uploader::Client(log.client_id);
        if !self.expected_clients.contains(&log.client_id) {
            self.rejected += 1;
            return Err(CollectError::Unexpected(who));
        }
        if self.clients.contains_key(&log.client_id) {
            self.rejected += 1;
            return Err(CollectError::Duplicate(who));
        }
        self.clients.insert(log.client_id, log);
        Ok(())
    }

    pub fn accept_edge(&mut self, log: EdgeLog) -> Result<(), CollectError> {
        if !self.expect_edge {
            self.rejected += 1;
            return Err(CollectError::Unexpected(Uploader::Edge));
        }
        if self.edge.is_some() {
            self.rejected += 1;
            return Err(CollectError::Duplicate(Uploader::Edge));
        }
        self.edge = Some(log);
        Ok(())
    }

    pub fn uploads(&self) -> usize {
        self.clients.len() + usize::from(self.edge.is_some())
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn missing(&self) -> Vec<Uploader> {
        let mut missing: Vec<Uploader> = self
            .expected_clients
            .iter()
            .filter(|id| !self.clients.contains_key(id))
            .map(|id| Uploader::Client(*id))
            .collect();
        if self.expect_edge && self.edge.is_none() {
            missing.push(Uploader::Edge);
        }
        missing
    }

    /// Client logs in id order and the edge log (empty when the edge is off).
    pub fn into_parts(self) -> (Vec<ClientLog>, EdgeLog, Vec<Uploader>) {
        let missing = self.missing();
        (
            self.clients.into_values().collect(),
            self.edge.unwrap_or_default(),
            missing,
        )
    }
}

/// Everything recorded during one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub run_id: String,
    pub algorithm: String,
    pub world_dt_s: f64,
    pub edge_dt_s: f64,
    pub n_vehicles: usize,
    pub ticks: u64,
    pub world_steps: Vec<WorldStepRecord>,
    pub timings: Vec<StepTimings>,
    pub safety: Vec<SafetyEvent>,
    pub clients: Vec<ClientLog>,
    pub edge: EdgeLog,
    pub partial: bool,
    pub notes: Vec<String>,
    pub duplicate_done: u64,
    pub ignored_controls: u64,
    pub edge_failures: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyTotals {
    pub headway_violations: u64,
    pub collisions: u64,
    pub lane_violations: u64,
    pub blockages: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeSummary {
    pub invocations: u64,
    pub runtime_p50_ms: f64,
    pub runtime_p99_ms: f64,
    pub runtime_max_ms: f64,
    pub deadline_ms: f64,
    pub deadline_violations: u64,
    pub timeouts: u64,
    pub max_cluster_size: usize,
    pub expanded_nodes: u64,
    pub plan_violations: u64,
    pub infeasible_clusters: u64,
    pub capped_clusters: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimeSummary {
    /// Mean over ticks of the slowest client's step time.
    pub mean_max_ms: f64,
    /// Mean over all client-ticks.
    pub mean_ms: f64,
    pub mean_processing_ms: f64,
    pub mean_network_ms: f64,
    pub mean_barrier_ms: f64,
    /// Sum over ticks of the slowest client's step time.
    pub total_max_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub algorithm: String,
    pub partial: bool,
    pub notes: Vec<String>,
    pub ticks: u64,
    pub n_vehicles: usize,
    pub n_clients: usize,
    pub world_dt_s: f64,
    pub client_step: StepTimeSummary,
    pub world_step_mean_ms: f64,
    pub traffic_rows: usize,
    pub mean_deviation_mps: f64,
    pub mean_velocity_mps: f64,
    pub mean_velocity_kph: f64,
    /// First simulated time at which the mean deviation across vehicles is
    /// within [`DEVIATION_BAND_MPS`].
    pub time_to_band_s: Option<f64>,
    pub safety: SafetyTotals,
    pub counters: ClientCounters,
    pub edge_share: f64,
    pub edge: EdgeSummary,
    pub duplicate_done: u64,
    pub ignored_controls: u64,
    pub edge_failures: u64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0u64), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Nearest-rank percentile of an unsorted sample; 0 for an empty sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Per-tick mean deviation across vehicles, in tick order.
pub fn deviation_series(traffic: &[TrafficRecord]) -> Vec<(u64, f64)> {
    let mut per_tick: BTreeMap<u64, (f64, u64)> = BTreeMap::new();
    for r in traffic {
        let e = per_tick.entry(r.tick).or_default();
        e.0 += r.deviation;
        e.1 += 1;
    }
    per_tick
        .into_iter()
        .map(|(t, (sum, n))| (t, sum / n as f64))
        .collect()
}

/// Traffic records of every client merged by `(tick, vehicle_id)`.
pub fn merged_traffic(clients: &[ClientLog]) -> Vec<TrafficRecord> {
    let mut all: Vec<TrafficRecord> = clients.iter().flat_map(|c| c.traffic.iter().copied()).collect();
    all.sort_by_key(|r| (r.tick, r.vehicle_id));
    all
}

/// Reduces a run's raw records to the reported quantities.
pub fn aggregate(bundle: &MetricsBundle) -> RunSummary {
    let traffic = merged_traffic(&bundle.clients);
    summarize(bundle, &traffic)
}

pub(crate) fn summarize(bundle: &MetricsBundle, traffic: &[TrafficRecord]) -> RunSummary {
    let mut per_tick_max: BTreeMap<u64, f64> = BTreeMap::new();
    for t in &bundle.timings {
        let e = per_tick_max.entry(t.tick).or_insert(0.0);
        *e = e.max(t.total_ms());
    }
    let client_step = StepTimeSummary {
        mean_max_ms: mean(per_tick_max.values().copied()),
        mean_ms: mean(bundle.timings.iter().map(StepTimings::total_ms)),
        mean_processing_ms: mean(bundle.timings.iter().map(|t| t.processing_ms)),
        mean_network_ms: mean(bundle.timings.iter().map(|t| t.network_ms)),
        mean_barrier_ms: mean(bundle.timings.iter().map(|t| t.barrier_ms)),
        total_max_ms: per_tick_max.values().sum(),
    };

    let mut safety = SafetyTotals::default();
    for e in &bundle.safety {
        match e.kind {
            SafetyKind::Headway => safety.headway_violations += 1,
            SafetyKind::Collision => safety.collisions += 1,
            SafetyKind::Lane => safety.lane_violations += 1,
            SafetyKind::Blockage => safety.blockages += 1,
        }
    }

    let mut counters = ClientCounters::default();
    for c in &bundle.clients {
        counters.merge(&c.counters);
    }
    let decided = counters.edge_ticks + counters.local_ticks;
    let edge_share = if decided == 0 {
        0.0
    } else {
        counters.edge_ticks as f64 / decided as f64
    };

    let deadline_ms = bundle.edge_dt_s * 1000.0;
    let runtimes: Vec<f64> = bundle.edge.invocations.iter().map(|e| e.runtime_ms).collect();
    let edge = EdgeSummary {
        invocations: bundle.edge.invocations.len() as u64,
        runtime_p50_ms: percentile(&runtimes, 50.0),
        runtime_p99_ms: percentile(&runtimes, 99.0),
        runtime_max_ms: runtimes.iter().copied().fold(0.0, f64::max),
        deadline_ms,
        deadline_violations: runtimes.iter().filter(|r| **r > deadline_ms).count() as u64,
        timeouts: bundle.edge.invocations.iter().filter(|e| e.timeout).count() as u64,
        max_cluster_size: bundle
            .edge
            .invocations
            .iter()
            .flat_map(|e| e.cluster_sizes.iter().copied())
            .max()
            .unwrap_or(0),
        expanded_nodes: bundle.edge.invocations.iter().map(|e| e.expanded_nodes).sum(),
        plan_violations: bundle.edge.invocations.iter().map(|e| e.plan_violations as u64).sum(),
        infeasible_clusters: bundle
            .edge
            .invocations
            .iter()
            .map(|e| e.infeasible_clusters as u64)
            .sum(),
        capped_clusters: bundle.edge.invocations.iter().map(|e| e.capped_clusters as u64).sum(),
    };

    let mean_velocity_mps = mean(traffic.iter().map(|r| r.v));
    let time_to_band_s = deviation_series(traffic)
        .into_iter()
        .find(|(_, d)| *d <= DEVIATION_BAND_MPS)
        .map(|(t, _)| t as f64 * bundle.world_dt_s);

    RunSummary {
        run_id: bundle.run_id.clone(),
        algorithm: bundle.algorithm.clone(),
        partial: bundle.partial,
        notes: bundle.notes.clone(),
        ticks: bundle.ticks,
        n_vehicles: bundle.n_vehicles,
        n_clients: bundle.clients.len(),
        world_dt_s: bundle.world_dt_s,
        client_step,
        world_step_mean_ms: mean(bundle.world_steps.iter().map(|w| w.world_step_ms)),
        traffic_rows: traffic.len(),
        mean_deviation_mps: mean(traffic.iter().map(|r| r.deviation)),
        mean_velocity_mps,
        mean_velocity_kph: mps_to_kph(mean_velocity_mps),
        time_to_band_s,
        safety,
        counters,
        edge_share,
        edge,
        duplicate_done: bundle.duplicate_done,
        ignored_controls: bundle.ignored_controls,
        edge_failures: bundle.edge_failures,
    }
}
