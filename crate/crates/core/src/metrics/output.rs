use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    merged_traffic, summarize, EdgeMetrics, MetricsBundle, RunSummary, SafetyEvent, StepTimings,
    TrafficRecord, WorldStepRecord,
};

/// CSV files written for every run, in emission order.
pub const CSV_FILES: [&str; 5] = [
    "step_timings.csv",
    "traffic.csv",
    "safety.csv",
    "edge.csv",
    "world_steps.csv",
];

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("plot {path}: {reason}")]
    Plot { path: PathBuf, reason: String },
}

/// Reduced records of one run, as written to and read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub traffic: Vec<TrafficRecord>,
    pub timings: Vec<StepTimings>,
    pub safety: Vec<SafetyEvent>,
    pub edge: Vec<EdgeMetrics>,
    pub world_steps: Vec<WorldStepRecord>,
}

impl RunArtifacts {
    pub fn from_bundle(bundle: &MetricsBundle) -> Self {
        let traffic = merged_traffic(&bundle.clients);
        let summary = summarize(bundle, &traffic);
        let mut timings = bundle.timings.clone();
        timings.sort_by_key(|t| (t.tick, t.client_id));
        Self {
            summary,
            traffic,
            timings,
            safety: bundle.safety.clone(),
            edge: bundle.edge.invocations.clone(),
            world_steps: bundle.world_steps.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SafetyRow {
    tick: u64,
    kind: super::SafetyKind,
    vehicle_a: u32,
    vehicle_b: Option<u32>,
    value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    generation_tick: u64,
    algorithm: String,
    n_vehicles: usize,
    cluster_sizes: String,
    runtime_ms: f64,
    wall_ms: f64,
    cpu_ms: f64,
    expanded_nodes: u64,
    plan_violations: usize,
    infeasible_clusters: usize,
    capped_clusters: usize,
    timeout: bool,
    compensation_steps: u32,
    buffers: usize,
    min_delivery_tick: Option<u64>,
    max_delivery_tick: Option<u64>,
}

impl From<&EdgeMetrics> for EdgeRow {
    fn from(e: &EdgeMetrics) -> Self {
        Self {
            generation_tick: e.generation_tick,
            algorithm: e.algorithm.clone(),
            n_vehicles: e.n_vehicles,
            cluster_sizes: e
                .cluster_sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            runtime_ms: e.runtime_ms,
            wall_ms: e.wall_ms,
            cpu_ms: e.cpu_ms,
            expanded_nodes: e.expanded_nodes,
            plan_violations: e.plan_violations,
            infeasible_clusters: e.infeasible_clusters,
            capped_clusters: e.capped_clusters,
            timeout: e.timeout,
            compensation_steps: e.compensation_steps,
            buffers: e.buffers,
            min_delivery_tick: e.min_delivery_tick,
            max_delivery_tick: e.max_delivery_tick,
        }
    }
}

impl EdgeRow {
    fn into_metrics(self) -> Result<EdgeMetrics, String> {
        let cluster_sizes = if self.cluster_sizes.is_empty() {
            Vec::new()
        } else {
            self.cluster_sizes
                .split(';')
                .map(|s| s.parse::<usize>().map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?
        };
        Ok(EdgeMetrics {
            generation_tick: self.generation_tick,
            algorithm: self.algorithm,
            n_vehicles: self.n_vehicles,
            cluster_sizes,
            runtime_ms: self.runtime_ms,
            wall_ms: self.wall_ms,
            cpu_ms: self.cpu_ms,
            expanded_nodes: self.expanded_nodes,
            plan_violations: self.plan_violations,
            infeasible_clusters: self.infeasible_clusters,
            capped_clusters: self.capped_clusters,
            timeout: self.timeout,
            compensation_steps: self.compensation_steps,
            buffers: self.buffers,
            min_delivery_tick: self.min_delivery_tick,
            max_delivery_tick: self.max_delivery_tick,
        })
    }
}

fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<(), OutputError> {
    let err = |e: csv::Error| OutputError::Write {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(err)?;
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|source| OutputError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, OutputError> {
    let err = |reason: String| OutputError::Read {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| err(e.to_string()))).collect()
}

/// Writes the run's CSVs and summary into `out_dir`.
pub fn emit_csv(run: &RunArtifacts, out_dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    fs::create_dir_all(out_dir).map_err(|source| OutputError::Write {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let path = |name: &str| out_dir.join(name);
    write_csv(
        &path("step_timings.csv"),
        &["tick", "client_id", "processing_ms", "network_ms", "barrier_ms"],
        &run.timings,
    )?;
    write_csv(
        &path("traffic.csv"),
        &["tick", "vehicle_id", "v", "v_target", "deviation", "lane", "s", "source"],
        &run.traffic,
    )?;
    write_csv(
        &path("safety.csv"),
        &["tick", "kind", "vehicle_a", "vehicle_b", "value"],
        run.safety.iter().map(|e| SafetyRow {
            tick: e.tick,
            kind: e.kind,
            vehicle_a: e.vehicle_a,
            vehicle_b: e.vehicle_b,
            value: e.value,
        }),
    )?;
    write_csv(
        &path("edge.csv"),
        &[
            "generation_tick",
            "algorithm",
            "n_vehicles",
            "cluster_sizes",
            "runtime_ms",
            "wall_ms",
            "cpu_ms",
            "expanded_nodes",
            "plan_violations",
            "infeasible_clusters",
            "capped_clusters",
            "timeout",
            "compensation_steps",
            "buffers",
            "min_delivery_tick",
            "max_delivery_tick",
        ],
        run.edge.iter().map(EdgeRow::from),
    )?;
    write_csv(
        &path("world_steps.csv"),
        &["tick", "world_step_ms", "edge_wait_ms"],
        &run.world_steps,
    )?;
    let summary_path = path(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&run.summary).expect("summary serializes");
    fs::write(&summary_path, text + "\n").map_err(|source| OutputError::Write {
        path: summary_path.clone(),
        source,
    })?;
    let mut written: Vec<PathBuf> = CSV_FILES.iter().map(|f| path(f)).collect();
    written.push(summary_path);
    Ok(written)
}

/// Reads a run directory written by [`emit_csv`].
pub fn load_run(dir: &Path) -> Result<RunArtifacts, OutputError> {
    if !dir.is_dir() {
        return Err(OutputError::Read {
            path: dir.to_path_buf(),
            reason: "not a directory".into(),
        });
    }
    let summary_path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary_path).map_err(|e| OutputError::Read {
        path: summary_path.clone(),
        reason: e.to_string(),
    })?;
    let summary: RunSummary = serde_json::from_str(&text).map_err(|e| OutputError::Read {
        path: summary_path,
        reason: e.to_string(),
    })?;
    let safety: Vec<SafetyRow> = read_csv(&dir.join("safety.csv"))?;
    let edge_path = dir.join("edge.csv");
    let edge: Vec<EdgeRow> = read_csv(&edge_path)?;
    Ok(RunArtifacts {
        summary,
        traffic: read_csv(&dir.join("traffic.csv"))?,
        timings: read_csv(&dir.join("step_timings.csv"))?,
        safety: safety
            .into_iter()
            .map(|r| SafetyEvent {
                tick: r.tick,
                kind: r.kind,
                vehicle_a: r.vehicle_a,
                vehicle_b: r.vehicle_b,
                value: r.value,
            })
            .collect(),
        edge: edge
            .into_iter()
            .map(EdgeRow::into_metrics)
            .collect::<Result<_, _>>()
            .map_err(|reason| OutputError::Read {
                path: edge_path,
                reason,
            })?,
        world_steps: read_csv(&dir.join("world_steps.csv"))?,
    })
}
