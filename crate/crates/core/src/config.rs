//! Scenario files.
//!
//! Scenarios are YAML with anchors and `<<` merge keys, laid out in four
//! sections: `world`, `edge_base`, `network` and `vehicles`. Speeds are given
//! in km/h and converted to m/s on load. Unknown top-level keys are ignored so
//! that files can hold anchor templates such as `vehicle_base: &vehicle_base`.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimClock;
use crate::netmodel::LatencyModel;
use crate::types::Position;
use crate::units::kph_to_mps;
use crate::world::{HighwayTopology, VehicleSpawn};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario parse error{}: {message}", location_suffix(*.line, *.column))]
    Parse {
        message: String,
        line: Option<usize>,
        column: Option<usize>,
    },
    #[error("invalid scenario:\n{}", format_issues(.0))]
    Invalid(Vec<ConfigIssue>),
}

fn location_suffix(line: Option<usize>, column: Option<usize>) -> String {
    match (line, column) {
        (Some(l), Some(c)) => format!(" at line {l} column {c}"),
        (Some(l), None) => format!(" at line {l}"),
        _ => String::new(),
    }
}

fn format_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

impl ConfigError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            ConfigError::Invalid(issues) => issues,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisconnectPolicy {
    Abort,
    Continue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeAlgorithm {
    ClusteredAstar,
    JointAstar,
    None,
}

impl EdgeAlgorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeAlgorithm::ClusteredAstar => "CLUSTERED_ASTAR",
            EdgeAlgorithm::JointAstar => "JOINT_ASTAR",
            EdgeAlgorithm::None => "NONE",
        }
    }
}

impl std::str::FromStr for EdgeAlgorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "clustered_astar" => Ok(EdgeAlgorithm::ClusteredAstar),
            "joint_astar" => Ok(EdgeAlgorithm::JointAstar),
            "none" | "greedy" => Ok(EdgeAlgorithm::None),
            other => Err(format!(
                "unknown algorithm {other:?} (expected clustered_astar, joint_astar or none)"
            )),
        }
    }
}

/// Which clock charges edge runtime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuntimeClock {
    ThreadCpu,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSection {
    pub sync_mode: bool,
    pub client_port: u16,
    pub fixed_delta_seconds: f64,
    pub seed: u64,
    pub lanes: u32,
    pub lane_width: f64,
    pub length: f64,
    pub min_headway: f64,
    pub collision_distance: f64,
    pub max_ticks: u64,
    pub barrier_timeout_s: f64,
    pub lookahead_m: f64,
    pub on_disconnect: DisconnectPolicy,
}

impl Default for WorldSection {
    fn default() -> Self {
        let topo = HighwayTopology::default();
        Self {
            sync_mode: true,
            client_port: crate::protocol::DEFAULT_PORT,
            fixed_delta_seconds: 0.05,
            seed: 0,
            lanes: topo.num_lanes,
            lane_width: topo.lane_width,
            length: topo.length,
            min_headway: topo.min_headway,
            collision_distance: topo.collision_distance,
            max_ticks: 2000,
            barrier_timeout_s: 30.0,
            lookahead_m: 100.0,
            on_disconnect: DisconnectPolicy::Abort,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeSection {
    pub algorithm: EdgeAlgorithm,
    /// Default target speed in km/h for vehicles that do not set their own.
    pub target_speed: Option<f64>,
    pub num_lanes: Option<u32>,
    pub edge_dt: f64,
    pub search_dt: f64,
    pub edge_sets_destination: bool,
    pub staleness_threshold_ms: f64,
    pub cluster_capacity: usize,
    pub cluster_on_target_velocity: bool,
    pub max_expansions: u64,
    /// Planner timeout; defaults to one edge period.
    pub timeout_ms: Option<f64>,
    /// Busy delay added to every invocation, for deadline experiments.
    pub inject_delay_ms: f64,
    pub runtime_clock: RuntimeClock,
}

impl Default for EdgeSection {
    fn default() -> Self {
        Self {
            algorithm: EdgeAlgorithm::ClusteredAstar,
            target_speed: None,
            num_lanes: None,
            edge_dt: 0.2,
            search_dt: 2.0,
            edge_sets_destination: false,
            staleness_threshold_ms: 400.0,
            cluster_capacity: 3,
            cluster_on_target_velocity: false,
            max_expansions: 200_000,
            timeout_ms: None,
            inject_delay_ms: 0.0,
            runtime_clock: RuntimeClock::ThreadCpu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSection {
    #[serde(flatten)]
    pub model: LatencyModel,
    #[serde(default)]
    pub edge_position: [f64; 2],
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            model: LatencyModel::default(),
            edge_position: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Behavior {
    /// km/h
    pub max_speed: f64,
    pub overtake_allowed: bool,
    /// km/h; falls back to `edge_base.target_speed`.
    pub target_speed: Option<f64>,
    /// km/h
    pub initial_speed: f64,
    /// Amplitude (m/s) of uniform noise on observed neighbor speeds.
    pub speed_estimate_noise: f64,
    /// Busy work per control step, standing in for a perception and
    /// planning stack the kinematic world does not have.
    pub step_work_ms: f64,
}

impl Default for Behavior {
    fn default() -> Self {
        Self {
            max_speed: 120.0,
            overtake_allowed: true,
            target_speed: None,
            initial_speed: 0.0,
            speed_estimate_noise: 0.0,
            step_work_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    /// `[x, y, z, pitch, yaw, roll]`; x maps to s, y to the lane.
    pub spawn_position: Vec<f64>,
    /// `[x, y, z]`; x is the destination s.
    #[serde(default)]
    pub destination: Option<Vec<f64>>,
    #[serde(default)]
    pub behavior: Behavior,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub world: WorldSection,
    #[serde(default)]
    pub edge_base: EdgeSection,
    #[serde(default)]
    pub network: NetworkSection,
    #[serde(default)]
    pub vehicles: Vec<VehicleConfig>,
}

/// Reads, merges, defaults and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

fn parse_error(e: serde_yaml::Error) -> ConfigError {
    let loc = e.location();
    ConfigError::Parse {
        message: e.to_string(),
        line: loc.as_ref().map(|l| l.line()),
        column: loc.as_ref().map(|l| l.column()),
    }
}

pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut value: serde_yaml::Value = serde_yaml::from_str(text).map_err(parse_error)?;
    if value.is_null() {
        value = serde_yaml::Value::Mapping(Default::default());
    }
    value.apply_merge().map_err(parse_error)?;
    if let serde_yaml::Value::Mapping(map) = &mut value {
        map.retain(|k, _| {
            matches!(
                k.as_str(),
                Some("world" | "edge_base" | "network" | "vehicles")
            )
        });
        // `vehicles:` with no entries parses as null.
        if let Some(v) = map.get_mut("vehicles") {
            if v.is_null() {
                *v = serde_yaml::Value::Sequence(Vec::new());
            }
        }
    }
    let config: ScenarioConfig = serde_yaml::from_value(value).map_err(parse_error)?;
    config.validate()?;
    Ok(config)
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    /// Every invariant violation, each tagged with its config path.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut issue = |path: String, message: String| out.push(ConfigIssue { path, message });
        let w = &self.world;
        let e = &self.edge_base;

        if !w.sync_mode {
            issue(
                "world.sync_mode".into(),
                "only synchronous (lockstep) mode is supported".into(),
            );
        }
        if let Err(err) = SimClock::new(w.fixed_delta_seconds, e.edge_dt, e.search_dt) {
            let path = match err {
                crate::clock::ClockError::NonPositiveWorldDt(_) => "world.fixed_delta_seconds",
                crate::clock::ClockError::EdgeNotMultiple { .. } => "edge_base.edge_dt",
                crate::clock::ClockError::SearchNotMultiple { .. } => "edge_base.search_dt",
            };
            issue(path.into(), err.to_string());
        }
        if w.lanes < 1 {
            issue("world.lanes".into(), "at least one lane is required".into());
        }
        if !(w.lane_width > 0.0) {
            issue("world.lane_width".into(), "must be positive".into());
        }
        if !(w.collision_distance > 0.0 && w.collision_distance < w.min_headway) {
            issue(
                "world.collision_distance".into(),
                format!(
                    "must satisfy 0 < collision_distance < min_headway ({})",
                    w.min_headway
                ),
            );
        }
        if !(w.min_headway < w.length) {
            issue(
                "world.min_headway".into(),
                format!("must be shorter than the highway ({} m)", w.length),
            );
        }
        if !(w.barrier_timeout_s > 0.0) {
            issue("world.barrier_timeout_s".into(), "must be positive".into());
        }
        if !(w.lookahead_m > 0.0) {
            issue("world.lookahead_m".into(), "must be positive".into());
        }
        if let Some(n) = e.num_lanes {
            if n != w.lanes {
                issue(
                    "edge_base.num_lanes".into(),
                    format!("{n} disagrees with world.lanes = {}", w.lanes),
                );
            }
        }
        if !(e.staleness_threshold_ms >= 0.0) {
            issue(
                "edge_base.staleness_threshold_ms".into(),
                "must be >= 0".into(),
            );
        }
        if e.cluster_capacity < 1 {
            issue("edge_base.cluster_capacity".into(), "must be >= 1".into());
        }
        if e.max_expansions < 1 {
            issue("edge_base.max_expansions".into(), "must be >= 1".into());
        }
        if let Some(t) = e.timeout_ms {
            if !(t > 0.0) {
                issue("edge_base.timeout_ms".into(), "must be positive".into());
            }
        }
        if !(e.inject_delay_ms >= 0.0) {
            issue("edge_base.inject_delay_ms".into(), "must be >= 0".into());
        }
        if let Some(t) = e.target_speed {
            if !(t >= 0.0) {
                issue("edge_base.target_speed".into(), "must be >= 0".into());
            }
        }
        if e.algorithm == EdgeAlgorithm::JointAstar && self.vehicles.len() > 3 {
            issue(
                "edge_base.algorithm".into(),
                format!(
                    "joint_astar plans all vehicles jointly and supports at most 3, scenario has {}",
                    self.vehicles.len()
                ),
            );
        }
        if let Err(err) = self.network.model.validate() {
            issue("network".into(), err.to_string());
        }

        let mut placed: Vec<(usize, i64, f64)> = Vec::new();
        for (i, v) in self.vehicles.iter().enumerate() {
            let base = format!("vehicles[{i}]");
            let b = &v.behavior;
            if v.spawn_position.len() != 6 {
                issue(
                    format!("{base}.spawn_position"),
                    format!(
                        "expected [x, y, z, pitch, yaw, roll], got {} values",
                        v.spawn_position.len()
                    ),
                );
            } else if v.spawn_position.iter().any(|x| !x.is_finite()) {
                issue(format!("{base}.spawn_position"), "values must be finite".into());
            } else if w.lane_width > 0.0 {
                let lane = (v.spawn_position[1] / w.lane_width).floor() as i64;
                if lane < 0 || lane >= w.lanes as i64 {
                    issue(
                        format!("{base}.spawn_position"),
                        format!(
                            "y = {} maps to lane {lane}, outside 0..{}",
                            v.spawn_position[1], w.lanes
                        ),
                    );
                } else {
                    placed.push((i, lane, v.spawn_position[0]));
                }
                if v.spawn_position[0] < 0.0 || v.spawn_position[0] >= w.length {
                    issue(
                        format!("{base}.spawn_position"),
                        format!("x = {} is off the {} m highway", v.spawn_position[0], w.length),
                    );
                }
            }
            if let Some(d) = &v.destination {
                if d.len() != 3 {
                    issue(
                        format!("{base}.destination"),
                        format!("expected [x, y, z], got {} values", d.len()),
                    );
                } else if !d[0].is_finite() {
                    issue(format!("{base}.destination"), "x must be finite".into());
                }
            }
            if !(b.max_speed > 0.0) {
                issue(format!("{base}.behavior.max_speed"), "must be positive".into());
            }
            if !(b.initial_speed >= 0.0) {
                issue(format!("{base}.behavior.initial_speed"), "must be >= 0".into());
            } else if b.initial_speed > b.max_speed {
                issue(
                    format!("{base}.behavior.initial_speed"),
                    format!("{} km/h exceeds max_speed {} km/h", b.initial_speed, b.max_speed),
                );
            }
            if !(b.speed_estimate_noise >= 0.0) {
                issue(
                    format!("{base}.behavior.speed_estimate_noise"),
                    "must be >= 0".into(),
                );
            }
            if !(b.step_work_ms >= 0.0) {
                issue(format!("{base}.behavior.step_work_ms"), "must be >= 0".into());
            }
            match b.target_speed.or(e.target_speed) {
                None => issue(
                    format!("{base}.behavior.target_speed"),
                    "no target speed (set it here or in edge_base.target_speed)".into(),
                ),
                Some(t) if !(t >= 0.0) => {
                    issue(format!("{base}.behavior.target_speed"), "must be >= 0".into())
                }
                Some(t) if t > b.max_speed => issue(
                    format!("{base}.behavior.target_speed"),
                    format!("{t} km/h exceeds max_speed {} km/h", b.max_speed),
                ),
                Some(_) => {}
            }
        }
        for (a, pa) in placed.iter().enumerate() {
            for pb in &placed[a + 1..] {
                if pa.1 == pb.1 && (pa.2 - pb.2).abs() < w.collision_distance {
                    issue(
                        format!("vehicles[{}].spawn_position", pb.0),
                        format!(
                            "overlaps vehicles[{}] in lane {} ({:.3} m apart, collision distance {} m)",
                            pa.0,
                            pa.1,
                            (pa.2 - pb.2).abs(),
                            w.collision_distance
                        ),
                    );
                }
            }
        }
        out
    }

    pub fn clock(&self) -> SimClock {
        SimClock::new(
            self.world.fixed_delta_seconds,
            self.edge_base.edge_dt,
            self.edge_base.search_dt,
        )
        .expect("validated scenario")
    }

    pub fn topology(&self) -> HighwayTopology {
        HighwayTopology {
            num_lanes: self.world.lanes,
            lane_width: self.world.lane_width,
            length: self.world.length,
            min_headway: self.world.min_headway,
            collision_distance: self.world.collision_distance,
        }
    }

    /// Vehicles in SI units; ids follow list order.
    pub fn spawns(&self) -> Vec<VehicleSpawn> {
        self.vehicles
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let b = &v.behavior;
                let target = b.target_speed.or(self.edge_base.target_speed).unwrap_or(0.0);
                let destination_s = match (&v.destination, self.edge_base.edge_sets_destination) {
                    (Some(d), false) => d[0],
                    _ => self.world.length,
                };
                VehicleSpawn {
                    id: i as u32,
                    lane: (v.spawn_position[1] / self.world.lane_width).floor() as i64,
                    s: v.spawn_position[0],
                    initial_speed: kph_to_mps(b.initial_speed).unwrap_or(0.0),
                    target_speed: kph_to_mps(target).unwrap_or(0.0),
                    max_speed: kph_to_mps(b.max_speed).unwrap_or(0.0),
                    destination_s,
                }
            })
            .collect()
    }

    pub fn edge_position(&self) -> Position {
        Position::new(self.network.edge_position[0], self.network.edge_position[1])
    }

    pub fn planner_timeout_ms(&self) -> f64 {
        self.edge_base
            .timeout_ms
            .unwrap_or(self.edge_base.edge_dt * 1000.0)
    }
}
