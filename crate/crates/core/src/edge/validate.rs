//! Plan validation against the road and against the other plans.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::types::WaypointBuffer;
use crate::world::HighwayTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanViolation {
    LaneOutOfRange { vehicle: u32, step: usize, lane: i64 },
    LaneJump { vehicle: u32, step: usize, from: i64, to: i64 },
    SpeedJump { vehicle: u32, step: usize, from: f64, to: f64 },
    NonMonotone { vehicle: u32, step: usize },
    Malformed { vehicle: u32, reason: String },
    MixedGeneration { vehicle: u32, expected: u64, found: u64 },
    Headway { a: u32, b: u32, step: usize, gap: f64 },
}

impl PlanViolation {
    pub fn vehicles(&self) -> Vec<u32> {
        match self {
            PlanViolation::LaneOutOfRange { vehicle, .. }
            | PlanViolation::LaneJump { vehicle, .. }
            | PlanViolation::SpeedJump { vehicle, .. }
            | PlanViolation::NonMonotone { vehicle, .. }
            | PlanViolation::Malformed { vehicle, .. }
            | PlanViolation::MixedGeneration { vehicle, .. } => vec![*vehicle],
            PlanViolation::Headway { a, b, .. } => vec![*a, *b],
        }
    }
}

const SPEED_TOLERANCE: f64 = 1e-6;

fn check_single(buf: &WaypointBuffer, topology: &HighwayTopology, out: &mut Vec<PlanViolation>) {
    let id = buf.vehicle_id;
    if buf.points.len() != buf.planned_speeds.len() {
        out.push(PlanViolation::Malformed {
            vehicle: id,
            reason: format!(
                "{} points but {} planned speeds",
                buf.points.len(),
                buf.planned_speeds.len()
            ),
        });
        return;
    }
    let mut lane = buf.origin.lane as i64;
    let mut v = buf.origin.v;
    let mut s = buf.origin.s;
    for (k, (p, speed)) in buf.points.iter().zip(&buf.planned_speeds).enumerate() {
        let l = p.lane(topology.lane_width);
        if !topology.lane_in_range(l) {
            out.push(PlanViolation::LaneOutOfRange {
                vehicle: id,
                step: k,
                lane: l,
            });
        }
        if (l - lane).abs() > 1 {
            out.push(PlanViolation::LaneJump {
                vehicle: id,
                step: k,
                from: lane,
                to: l,
            });
        }
        if (speed - v).abs() > 1.0 + SPEED_TOLERANCE || *speed < 0.0 {
            out.push(PlanViolation::SpeedJump {
                vehicle: id,
                step: k,
                from: v,
                to: *speed,
            });
        }
        if p.x < s {
            out.push(PlanViolation::NonMonotone { vehicle: id, step: k });
        }
        lane = l;
        v = *speed;
        s = p.x;
    }
}

/// Removes every buffer that breaks a road, kinematic or pairwise headway
/// rule. Both buffers of a conflicting pair are removed.
pub fn validate_plan(
    buffers: Vec<WaypointBuffer>,
    topology: &HighwayTopology,
) -> (Vec<WaypointBuffer>, Vec<PlanViolation>) {
    let mut violations = Vec::new();
    if let Some(first) = buffers.first() {
        let gen = first.generation_tick;
        for b in &buffers {
            if b.generation_tick != gen {
                violations.push(PlanViolation::MixedGeneration {
                    vehicle: b.vehicle_id,
                    expected: gen,
                    found: b.generation_tick,
                });
            }
        }
    }
    for b in &buffers {
        check_single(b, topology, &mut violations);
    }
    for (i, a) in buffers.iter().enumerate() {
        for b in &buffers[i + 1..] {
            let steps = a.points.len().min(b.points.len());
            for k in 0..steps {
                let (pa, pb) = (&a.points[k], &b.points[k]);
                let gap = (pa.x - pb.x).abs();
                if pa.lane(topology.lane_width) == pb.lane(topology.lane_width)
                    && gap < topology.min_headway
                {
                    violations.push(PlanViolation::Headway {
                        a: a.vehicle_id,
                        b: b.vehicle_id,
                        step: k,
                        gap,
                    });
                    break;
                }
            }
        }
    }
    let rejected: BTreeSet<u32> = violations.iter().flat_map(|v| v.vehicles()).collect();
    let kept = buffers
        .into_iter()
        .filter(|b| !rejected.contains(&b.vehicle_id))
        .collect();
    (kept, violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{PlanOrigin, Waypoint};

    fn topo() -> HighwayTopology {
        HighwayTopology::default()
    }

    fn buffer(id: u32, lane: u32, s0: f64, v: f64, lanes: &[u32]) -> WaypointBuffer {
        let mut s = s0;
        let mut points = Vec::new();
        for l in lanes {
            s += v * 0.2;
            points.push(Waypoint::on_highway(s, *l, 3.5));
        }
        WaypointBuffer {
            vehicle_id: id,
            generation_tick: 8,
            delivery_tick: 10,
            skipped_steps: 1,
            origin: PlanOrigin { s: s0, lane, v },
            planned_speeds: vec![v; lanes.len()],
            points,
        }
    }

    #[test]
    fn clean_plans_pass() {
        let a = buffer(0, 0, 0.0, 10.0, &[0, 1, 1]);
        let b = buffer(1, 2, 0.0, 10.0, &[2, 2, 3]);
        let (kept, v) = validate_plan(vec![a, b], &topo());
        assert!(v.is_empty());
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn lane_jump_rejected() {
        let a = buffer(0, 0, 0.0, 10.0, &[0, 2, 2]);
        let (kept, v) = validate_plan(vec![a], &topo());
        assert!(kept.is_empty());
        assert!(matches!(v[0], PlanViolation::LaneJump { step: 1, .. }));
    }

    #[test]
    fn colliding_pair_both_rejected() {
        let a = buffer(0, 0, 0.0, 10.0, &[0, 0, 0, 1]);
        let b = buffer(1, 1, 3.0, 10.0, &[1, 1, 1, 1]);
        let c = buffer(2, 3, 0.0, 10.0, &[3, 3, 3, 3]);
        let (kept, v) = validate_plan(vec![a, b, c], &topo());
        assert_eq!(kept.iter().map(|b| b.vehicle_id).collect::<Vec<_>>(), vec![2]);
        assert_eq!(
            v,
            vec![PlanViolation::Headway {
                a: 0,
                b: 1,
                step: 3,
                gap: 3.0
            }]
        );
    }

    #[test]
    fn speed_jump_and_out_of_range() {
        let mut a = buffer(0, 3, 0.0, 10.0, &[3, 4]);
        a.planned_speeds[0] = 12.0;
        let (kept, v) = validate_plan(vec![a], &topo());
        assert!(kept.is_empty());
        assert!(v.iter().any(|x| matches!(x, PlanViolation::LaneOutOfRange { lane: 4, .. })));
        assert!(v.iter().any(|x| matches!(x, PlanViolation::SpeedJump { .. })));
    }
}
