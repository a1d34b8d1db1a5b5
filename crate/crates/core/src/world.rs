//! Deterministic kinematic highway.
//!
//! Vehicles are points moving along a straight multi-lane road. Velocity and
//! lane changes take effect atomically at edge planning step boundaries; the
//! position integrates every world tick. Safety violations are reported, never
//! thrown.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimClock;
use crate::types::{Control, VehicleState};

/// Consecutive ticks a vehicle must stand behind a stopped leader before a
/// blockage is reported.
pub const BLOCKAGE_TICKS: u32 = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("unknown vehicle id {0}")]
    UnknownVehicle(u32),
    #[error("vehicle {id}: lane {lane} outside 0..{num_lanes}")]
    LaneOutOfRange { id: u32, lane: i64, num_lanes: u32 },
    #[error("vehicles {a} and {b} spawn {gap:.3} m apart in lane {lane} (collision distance {limit} m)")]
    OverlappingSpawn {
        a: u32,
        b: u32,
        lane: u32,
        gap: f64,
        limit: f64,
    },
    #[error("duplicate vehicle id {0}")]
    DuplicateVehicle(u32),
    #[error("vehicle {id}: {reason}")]
    InvalidVehicle { id: u32, reason: String },
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighwayTopology {
    pub num_lanes: u32,
    pub lane_width: f64,
    pub length: f64,
    pub min_headway: f64,
    pub collision_distance: f64,
}

impl Default for HighwayTopology {
    fn default() -> Self {
        Self {
            num_lanes: 4,
            lane_width: 3.5,
            length: 2000.0,
            min_headway: 7.0,
            collision_distance: 2.0,
        }
    }
}

impl HighwayTopology {
    pub fn validate(&self) -> Result<(), WorldError> {
        if self.num_lanes == 0 {
            return Err(WorldError::InvalidTopology("num_lanes must be >= 1".into()));
        }
        if !(self.lane_width > 0.0) {
            return Err(WorldError::InvalidTopology("lane_width must be > 0".into()));
        }
        if !(0.0 < self.collision_distance
            && self.collision_distance < self.min_headway
            && self.min_headway < self.length)
        {
            return Err(WorldError::InvalidTopology(format!(
                "need 0 < collision_distance ({}) < min_headway ({}) < length ({})",
                self.collision_distance, self.min_headway, self.length
            )));
        }
        Ok(())
    }

    pub fn lane_in_range(&self, lane: i64) -> bool {
        (0..self.num_lanes as i64).contains(&lane)
    }
}

/// Initial conditions for one vehicle, already in SI units and highway
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpawn {
    pub id: u32,
    pub lane: i64,
    pub s: f64,
    pub initial_speed: f64,
    pub target_speed: f64,
    pub max_speed: f64,
    pub destination_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct VehicleLimits {
    max_speed: f64,
    destination_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadwayViolation {
    pub follower: u32,
    pub leader: u32,
    pub gap: f64,
}

/// Safety observations on the post-tick state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub tick: u64,
    pub headway_violations: Vec<HeadwayViolation>,
    /// `(vehicle, lane it tried to reach)`.
    pub lane_violations: Vec<(u32, i64)>,
    pub collisions: Vec<(u32, u32)>,
    pub blockages: Vec<u32>,
}

impl SafetyReport {
    pub fn is_clean(&self) -> bool {
        self.headway_violations.is_empty()
            && self.lane_violations.is_empty()
            && self.collisions.is_empty()
            && self.blockages.is_empty()
    }
}

/// Effect of staging a control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Staged {
    /// Staged, possibly after clamping.
    Applied(Control),
    /// The vehicle already reached its destination.
    Ignored,
}

#[derive(Debug, Clone)]
pub struct World {
    clock: SimClock,
    topology: HighwayTopology,
    vehicles: BTreeMap<u32, VehicleState>,
    limits: BTreeMap<u32, VehicleLimits>,
    pending: BTreeMap<u32, Control>,
    pending_lane_violations: Vec<(u32, i64)>,
    stopped_streak: BTreeMap<u32, u32>,
    ignored_controls: u64,
    rng_seed: u64,
}

impl World {
    /// Builds the tick-0 world. Deterministic in its arguments.
    pub fn spawn(
        clock: SimClock,
        topology: HighwayTopology,
        spawns: &[VehicleSpawn],
        rng_seed: u64,
    ) -> Result<Self, WorldError> {
        topology.validate()?;
        let mut vehicles = BTreeMap::new();
        let mut limits = BTreeMap::new();
        for sp in spawns {
            if !topology.lane_in_range(sp.lane) {
                return Err(WorldError::LaneOutOfRange {
                    id: sp.id,
                    lane: sp.lane,
                    num_lanes: topology.num_lanes,
                });
            }
            if !(sp.initial_speed >= 0.0 && sp.initial_speed <= sp.max_speed) {
                return Err(WorldError::InvalidVehicle {
                    id: sp.id,
                    reason: format!(
                        "initial speed {} m/s outside [0, max_speed {}]",
                        sp.initial_speed, sp.max_speed
                    ),
                });
            }
            if !(sp.target_speed >= 0.0) {
                return Err(WorldError::InvalidVehicle {
                    id: sp.id,
                    reason: format!("target speed {} m/s is negative", sp.target_speed),
                });
            }
            if !sp.s.is_finite() {
                return Err(WorldError::InvalidVehicle {
                    id: sp.id,
                    reason: "spawn position is not finite".into(),
                });
            }
            let state = VehicleState {
                id: sp.id,
                lane: sp.lane as u32,
                s: sp.s,
                v: sp.initial_speed,
                v_target: sp.target_speed,
                v_anchor: sp.initial_speed,
                done: sp.s >= sp.destination_s,
            };
            if vehicles.insert(sp.id, state).is_some() {
                return Err(WorldError::DuplicateVehicle(sp.id));
            }
            limits.insert(
                sp.id,
                VehicleLimits {
                    max_speed: sp.max_speed,
                    destination_s: sp.destination_s,
                },
            );
        }
        let list: Vec<&VehicleState> = vehicles.values().collect();
        for (i, a) in list.iter().enumerate() {
            for b in &list[i + 1..] {
                let gap = (a.s - b.s).abs();
                if a.lane == b.lane && gap < topology.collision_distance {
                    return Err(WorldError::OverlappingSpawn {
                        a: a.id,
                        b: b.id,
                        lane: a.lane,
                        gap,
                        limit: topology.collision_distance,
                    });
                }
            }
        }
        Ok(Self {
            clock: clock.at(0),
            topology,
            vehicles,
            limits,
            pending: BTreeMap::new(),
            pending_lane_violations: Vec::new(),
            stopped_streak: BTreeMap::new(),
            ignored_controls: 0,
            rng_seed,
        })
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn tick_index(&self) -> u64 {
        self.clock.tick
    }

    pub fn topology(&self) -> &HighwayTopology {
        &self.topology
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn ignored_controls(&self) -> u64 {
        self.ignored_controls
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn all_done(&self) -> bool {
        !self.vehicles.is_empty() && self.vehicles.values().all(|v| v.done)
    }

    /// Snapshot of every vehicle in id order.
    pub fn states(&self) -> Vec<VehicleState> {
        self.vehicles.values().copied().collect()
    }

    pub fn max_speed(&self, id: u32) -> Option<f64> {
        self.limits.get(&id).map(|l| l.max_speed)
    }

    pub fn pending_control(&self, id: u32) -> Option<Control> {
        self.pending.get(&id).copied()
    }

    /// Stages `control` for the next tick, clamping it to the road and the
    /// vehicle's speed range.
    pub fn apply_control(&mut self, id: u32, control: Control) -> Result<Staged, WorldError> {
        let state = *self
            .vehicles
            .get(&id)
            .ok_or(WorldError::UnknownVehicle(id))?;
        if state.done {
            self.ignored_controls += 1;
            return Ok(Staged::Ignored);
        }
        let mut effective = control;
        let target_lane = state.lane as i64 + control.dlane() as i64;
        if !self.topology.lane_in_range(target_lane) {
            self.pending_lane_violations.push((id, target_lane));
            effective = effective.with_dlane(0);
        }
        if control.dv() != 0 {
            let max_speed = self.limits[&id].max_speed;
            let next = state.lattice_velocity(state.v_index() + control.dv() as i32);
            if next < -1e-9 || next > max_speed + 1e-9 {
                effective = effective.with_dv(0);
            }
        }
        self.pending.insert(id, effective);
        Ok(Staged::Applied(effective))
    }

    /// Advances the world by one fixed step and reports safety on the result.
    pub fn tick(&mut self) -> SafetyReport {
        let boundary = self.clock.is_edge_boundary(self.clock.tick);
        let dt = self.clock.world_dt_s;
        let pending = std::mem::take(&mut self.pending);
        for (id, state) in self.vehicles.iter_mut() {
            if !state.done && boundary {
                if let Some(control) = pending.get(id) {
                    let index = state.v_index() + control.dv() as i32;
                    state.v = state.lattice_velocity(index);
                    state.lane = (state.lane as i64 + control.dlane() as i64) as u32;
                }
            }
            state.s += state.v * dt;
            if !state.done && state.s >= self.limits[id].destination_s {
                state.done = true;
            }
        }
        self.clock.tick += 1;

        let mut report = SafetyReport {
            tick: self.clock.tick,
            lane_violations: std::mem::take(&mut self.pending_lane_violations),
            ..SafetyReport::default()
        };
        self.check_spacing(&mut report);
        report
    }

    fn check_spacing(&mut self, report: &mut SafetyReport) {
        let mut by_lane: BTreeMap<u32, Vec<&VehicleState>> = BTreeMap::new();
        for state in self.vehicles.values().filter(|v| !v.done) {
            by_lane.entry(state.lane).or_default().push(state);
        }
        let mut blocked = Vec::new();
        for lane in by_lane.values_mut() {
            lane.sort_by(|a, b| a.s.total_cmp(&b.s).then(a.id.cmp(&b.id)));
            for pair in lane.windows(2) {
                let (follower, leader) = (pair[0], pair[1]);
                let gap = leader.s - follower.s;
                if gap < self.topology.min_headway {
                    report.headway_violations.push(HeadwayViolation {
                        follower: follower.id,
                        leader: leader.id,
                        gap,
                    });
                    if gap < self.topology.collision_distance {
                        report.collisions.push((follower.id, leader.id));
                    }
                }
                if follower.v == 0.0 && leader.v == 0.0 && gap < 2.0 * self.topology.min_headway
                {
                    blocked.push(follower.id);
                }
            }
        }
        let mut streaks = BTreeMap::new();
        for id in blocked {
            let streak = self.stopped_streak.get(&id).copied().unwrap_or(0) + 1;
            if streak == BLOCKAGE_TICKS + 1 {
                report.blockages.push(id);
            }
            streaks.insert(id, streak);
        }
        self.stopped_streak = streaks;
    }

    pub fn snapshot(&self, id: u32) -> Result<VehicleState, WorldError> {
        self.vehicles
            .get(&id)
            .copied()
            .ok_or(WorldError::UnknownVehicle(id))
    }

    /// Active vehicles in the same or adjacent lanes within `lookahead_m` of
    /// `id`, ahead or behind, sorted by signed offset.
    pub fn neighbors(&self, id: u32, lookahead_m: f64) -> Result<Vec<VehicleState>, WorldError> {
        let me = self.snapshot(id)?;
        Ok(neighbors_of(self.vehicles.values(), &me, lookahead_m))
    }
}

/// Neighbor query over an arbitrary set of states; shared by the world and by
/// components that predict local behavior from a snapshot.
pub fn neighbors_of<'a>(
    states: impl IntoIterator<Item = &'a VehicleState>,
    me: &VehicleState,
    lookahead_m: f64,
) -> Vec<VehicleState> {
    let mut out: Vec<VehicleState> = states
        .into_iter()
        .filter(|o| o.id != me.id && !o.done)
        .filter(|o| (o.lane as i64 - me.lane as i64).abs() <= 1)
        .filter(|o| (o.s - me.s).abs() <= lookahead_m)
        .copied()
        .collect();
    out.sort_by(|a, b| (a.s - me.s).total_cmp(&(b.s - me.s)).then(a.id.cmp(&b.id)));
    out
}
