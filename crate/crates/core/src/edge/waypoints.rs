//! Trajectory generation: action sequences to waypoint buffers.

use crate::types::{PlanOrigin, VehicleState, Waypoint, WaypointBuffer};

use super::astar::Action;

/// Rolls `actions` forward from `origin`, one pose per edge step.
///
/// The first `skipped_steps` actions are the predicted moves for time that
/// elapses before the buffer can arrive; they are simulated but never
/// executed by the vehicle.
pub fn generate_waypoints(
    origin: &VehicleState,
    actions: &[Action],
    generation_tick: u64,
    skipped_steps: u32,
    lane_width: f64,
    edge_dt_s: f64,
) -> WaypointBuffer {
    let mut v_index = origin.v_index();
    let mut lane = origin.lane as i64;
    let mut s = origin.s;
    let mut points = Vec::with_capacity(actions.len());
    let mut planned_speeds = Vec::with_capacity(actions.len());
    for a in actions {
        v_index += a.dv();
        lane += a.dlane() as i64;
        let v = origin.lattice_velocity(v_index);
        s += v * edge_dt_s;
        points.push(Waypoint {
            x: s,
            y: lane as f64 * lane_width + lane_width / 2.0,
            z: 0.0,
            yaw: 0.0,
            pitch: 0.0,
            roll: 0.0,
        });
        planned_speeds.push(v);
    }
    WaypointBuffer {
        vehicle_id: origin.id,
        generation_tick,
        delivery_tick: generation_tick,
        skipped_steps,
        origin: PlanOrigin {
            s: origin.s,
            lane: origin.lane,
            v: origin.v,
        },
        points,
        planned_speeds,
    }
}
