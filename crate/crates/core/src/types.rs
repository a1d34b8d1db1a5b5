//! Domain values shared by every entity in a run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Kinematic state of one vehicle on the highway.
///
/// Velocities used for planning live on a 1 m/s lattice anchored at the spawn
/// velocity `v_anchor`; `v_target` keeps the unrounded desired speed so that
/// metrics report true deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    /// Lane index, 0 is the rightmost lane.
    pub lane: u32,
    /// Linear position along the highway in meters.
    pub s: f64,
    pub v: f64,
    pub v_target: f64,
    pub v_anchor: f64,
    pub done: bool,
}

impl VehicleState {
    /// Lattice index of the current velocity.
    pub fn v_index(&self) -> i32 {
        (self.v - self.v_anchor).round() as i32
    }

    /// Lattice index nearest to the target velocity.
    pub fn target_index(&self) -> i32 {
        (self.v_target - self.v_anchor).round() as i32
    }

    pub fn lattice_velocity(&self, index: i32) -> f64 {
        self.v_anchor + index as f64
    }

    /// Target velocity rounded onto this vehicle's lattice.
    pub fn lattice_target(&self) -> f64 {
        self.lattice_velocity(self.target_index())
    }

    pub fn deviation(&self) -> f64 {
        (self.v - self.v_target).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ControlSource {
    Local,
    Edge,
}

impl ControlSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            ControlSource::Local => "LOCAL",
            ControlSource::Edge => "EDGE",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ControlError {
    #[error("dv must be -1, 0 or +1, got {0}")]
    VelocityStep(i8),
    #[error("dlane must be -1, 0 or +1, got {0}")]
    LaneStep(i8),
    #[error("a control may change velocity or lane, not both (dv={dv}, dlane={dlane})")]
    Combined { dv: i8, dlane: i8 },
}

#[derive(Deserialize)]
struct RawControl {
    dv: i8,
    dlane: i8,
    source: ControlSource,
}

impl TryFrom<RawControl> for Control {
    type Error = ControlError;

    fn try_from(raw: RawControl) -> Result<Self, Self::Error> {
        Control::new(raw.dv, raw.dlane, raw.source)
    }
}

/// One planning-step command for a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawControl")]
pub struct Control {
    dv: i8,
    dlane: i8,
    source: ControlSource,
}

impl Control {
    pub fn new(dv: i8, dlane: i8, source: ControlSource) -> Result<Self, ControlError> {
        if !(-1..=1).contains(&dv) {
            return Err(ControlError::VelocityStep(dv));
        }
        if !(-1..=1).contains(&dlane) {
            return Err(ControlError::LaneStep(dlane));
        }
        if dv != 0 && dlane != 0 {
            return Err(ControlError::Combined { dv, dlane });
        }
        Ok(Self { dv, dlane, source })
    }

    pub fn hold(source: ControlSource) -> Self {
        Self {
            dv: 0,
            dlane: 0,
            source,
        }
    }

    pub fn accelerate(source: ControlSource) -> Self {
        Self {
            dv: 1,
            dlane: 0,
            source,
        }
    }

    pub fn decelerate(source: ControlSource) -> Self {
        Self {
            dv: -1,
            dlane: 0,
            source,
        }
    }

    pub fn velocity(dv: i8, source: ControlSource) -> Self {
        Self {
            dv: dv.signum(),
            dlane: 0,
            source,
        }
    }

    pub fn lane_change(dlane: i8, source: ControlSource) -> Self {
        Self {
            dv: 0,
            dlane: dlane.signum(),
            source,
        }
    }

    pub fn dv(&self) -> i8 {
        self.dv
    }

    pub fn dlane(&self) -> i8 {
        self.dlane
    }

    pub fn source(&self) -> ControlSource {
        self.source
    }

    pub fn with_dv(self, dv: i8) -> Self {
        Self {
            dv: dv.signum(),
            ..self
        }
    }

    pub fn with_dlane(self, dlane: i8) -> Self {
        Self {
            dlane: dlane.signum(),
            ..self
        }
    }
}

/// 6-DOF pose, meters and degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl Waypoint {
    /// Road-aligned pose at linear position `s` in the center of `lane`.
    pub fn on_highway(s: f64, lane: u32, lane_width: f64) -> Self {
        Self {
            x: s,
            y: lane_center(lane, lane_width),
            z: 0.0,
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
        }
    }

    /// Lane index implied by the lateral coordinate. May be negative or out
    /// of range for malformed buffers.
    pub fn lane(&self, lane_width: f64) -> i64 {
        (self.y / lane_width).floor() as i64
    }
}

pub fn lane_center(lane: u32, lane_width: f64) -> f64 {
    lane as f64 * lane_width + lane_width / 2.0
}

/// Vehicle state the plan was simulated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanOrigin {
    pub s: f64,
    pub lane: u32,
    pub v: f64,
}

/// Edge-generated trajectory for one vehicle.
///
/// `points[k]` is the pose at the end of edge step `k` counted from the
/// generation tick and `planned_speeds[k]` the velocity held during that step.
/// The first `skipped_steps` entries cover time that elapses before the buffer
/// can reach the vehicle and are never executed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointBuffer {
    pub vehicle_id: u32,
    pub generation_tick: u64,
    pub delivery_tick: u64,
    pub skipped_steps: u32,
    pub origin: PlanOrigin,
    pub points: Vec<Waypoint>,
    pub planned_speeds: Vec<f64>,
}

impl WaypointBuffer {
    /// Edge step covering `now_tick`, counted from the generation tick.
    pub fn step_index(&self, now_tick: u64, ticks_per_edge_step: u64) -> u64 {
        now_tick.saturating_sub(self.generation_tick) / ticks_per_edge_step
    }

    pub fn age_ms(&self, now_tick: u64, world_dt_ms: f64) -> f64 {
        now_tick.saturating_sub(self.generation_tick) as f64 * world_dt_ms
    }

    /// Every step advances by its planned speed times `edge_dt_s`.
    pub fn is_kinematically_consistent(&self, edge_dt_s: f64) -> bool {
        if self.points.len() != self.planned_speeds.len() {
            return false;
        }
        let mut prev = self.origin.s;
        for (point, speed) in self.points.iter().zip(&self.planned_speeds) {
            if (point.x - prev - speed * edge_dt_s).abs() > 1e-6 {
                return false;
            }
            prev = point.x;
        }
        true
    }
}

/// Planar position used by distance-dependent latency models.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance_m(&self, other: &Position) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}
