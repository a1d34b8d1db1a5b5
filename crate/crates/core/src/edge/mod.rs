//! Edge planner: prefix prediction, clustering, joint A*, validation and
//! waypoint generation for one generation tick.

pub mod astar;
pub mod cluster;
pub mod validate;
pub mod waypoints;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use crate::client::{evaluate_buffer, local_greedy_plan, BufferDecision, FollowParams, GreedyParams};
use crate::clock::SimClock;
use crate::metrics::EdgeMetrics;
use crate::types::{VehicleState, WaypointBuffer};
use crate::world::{neighbors_of, HighwayTopology};

pub use crate::config::{EdgeAlgorithm, RuntimeClock};
use astar::{joint_astar_until, Action, Agent, Problem, SearchStatus, Track};
use cluster::{cluster_count, cluster_vehicles, features};
pub use validate::{validate_plan, PlanViolation};
pub use waypoints::generate_waypoints;

/// A vehicle handed to the planner, with its state estimated at the
/// generation tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerVehicle {
    pub state: VehicleState,
    pub max_speed: f64,
    pub lane_changes: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeParams {
    pub algorithm: EdgeAlgorithm,
    pub clock: SimClock,
    pub topology: HighwayTopology,
    pub cluster_capacity: usize,
    pub cluster_on_target_velocity: bool,
    pub max_expansions: u64,
    /// Planning budget, counted after any injected delay.
    pub timeout_ms: f64,
    pub inject_delay_ms: f64,
    pub runtime_clock: RuntimeClock,
    pub staleness_threshold_ms: f64,
    pub lookahead_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerInput {
    pub generation_tick: u64,
    pub vehicles: Vec<PlannerVehicle>,
    /// Earlier buffers with their delivery ticks, used to predict what the
    /// vehicles do before this plan can arrive.
    pub previous: Vec<WaypointBuffer>,
    pub skipped_steps: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EdgeOutput {
    pub buffers: Vec<WaypointBuffer>,
    pub violations: Vec<PlanViolation>,
    pub metrics: EdgeMetrics,
}

/// Edge steps to skip so that a buffer built for `expected_latency_ms` starts
/// after it lands. Never less than one.
pub fn compensation_steps(clock: &SimClock, expected_latency_ms: f64) -> u32 {
    clock.edge_steps_for_ms(expected_latency_ms).max(1)
}

/// CPU time consumed by the calling thread, in milliseconds.
pub fn thread_cpu_ms() -> f64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid out-pointer and the clock id is a constant.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 * 1000.0 + ts.tv_nsec as f64 / 1e6
}

struct Stopwatch {
    clock: RuntimeClock,
    wall0: Instant,
    cpu0: f64,
}

impl Stopwatch {
    fn start(clock: RuntimeClock) -> Self {
        Self {
            clock,
            wall0: Instant::now(),
            cpu0: thread_cpu_ms(),
        }
    }

    fn wall_ms(&self) -> f64 {
        self.wall0.elapsed().as_secs_f64() * 1000.0
    }

    fn cpu_ms(&self) -> f64 {
        thread_cpu_ms() - self.cpu0
    }

    fn runtime_ms(&self) -> f64 {
        match self.clock {
            RuntimeClock::ThreadCpu => self.cpu_ms(),
            RuntimeClock::Wall => self.wall_ms(),
        }
    }
}

fn report(progress: Option<&AtomicU64>, ms: f64) {
    if let Some(p) = progress {
        p.store((ms * 1000.0) as u64, Ordering::Release);
    }
}

/// One-step kinematics at an edge boundary.
pub fn step_state(state: &VehicleState, action: Action, max_speed: f64, topology: &HighwayTopology, edge_dt_s: f64) -> VehicleState {
    let mut next = *state;
    let v = state.lattice_velocity(state.v_index() + action.dv());
    if v >= -1e-9 && v <= max_speed + 1e-9 {
        next.v = v.max(0.0);
    }
    let lane = state.lane as i64 + action.dlane() as i64;
    if topology.lane_in_range(lane) {
        next.lane = lane as u32;
    }
    next.s += next.v * edge_dt_s;
    next
}

/// Predicts the actions every vehicle takes at the first `steps` boundaries
/// from the generation tick: follow the newest already-delivered buffer if
/// the client rule accepts it, otherwise drive greedily.
pub fn predict_prefix(
    vehicles: &[PlannerVehicle],
    previous: &[WaypointBuffer],
    generation_tick: u64,
    steps: u32,
    params: &EdgeParams,
) -> (Vec<Vec<Action>>, Vec<VehicleState>) {
    let clock = &params.clock;
    let tpe = clock.ticks_per_edge_step();
    let follow = FollowParams {
        ticks_per_edge_step: tpe,
        world_dt_ms: clock.world_dt_ms(),
        staleness_threshold_ms: params.staleness_threshold_ms,
        num_lanes: params.topology.num_lanes,
        lane_width: params.topology.lane_width,
        min_headway: params.topology.min_headway,
    };
    let mut states: Vec<VehicleState> = vehicles.iter().map(|v| v.state).collect();
    let mut actions = vec![Vec::with_capacity(steps as usize); vehicles.len()];
    for k in 0..steps as u64 {
        let boundary = generation_tick + k * tpe;
        let chosen: Vec<Action> = vehicles
            .iter()
            .enumerate()
            .map(|(i, pv)| {
                let me = &states[i];
                let neighbors = neighbors_of(states.iter(), me, params.lookahead_m);
                let buffer = previous
                    .iter()
                    .filter(|b| b.vehicle_id == me.id && b.delivery_tick <= boundary && b.generation_tick < generation_tick)
                    .max_by_key(|b| b.generation_tick);
                if let Some(b) = buffer {
                    match evaluate_buffer(b, boundary, me, &neighbors, &follow) {
                        BufferDecision::Follow(c) => return Action::from_control(&c),
                        BufferDecision::Hold => return Action::Hold,
                        _ => {}
                    }
                }
                let greedy = GreedyParams {
                    num_lanes: params.topology.num_lanes,
                    min_headway: params.topology.min_headway,
                    edge_dt_s: clock.edge_dt_s,
                    max_speed: pv.max_speed,
                    overtake_allowed: pv.lane_changes,
                };
                Action::from_control(&local_greedy_plan(me, &neighbors, &greedy))
            })
            .collect();
        for (i, a) in chosen.into_iter().enumerate() {
            states[i] = step_state(&states[i], a, vehicles[i].max_speed, &params.topology, clock.edge_dt_s);
            actions[i].push(a);
        }
    }
    (actions, states)
}

fn track_from_actions(start: &VehicleState, actions: &[Action], max_speed: f64, horizon: u32, p: &EdgeParams) -> Track {
    let mut lanes = Vec::with_capacity(horizon as usize);
    let mut s = Vec::with_capacity(horizon as usize + 1);
    let mut cur = *start;
    s.push(cur.s);
    for k in 0..horizon as usize {
        let a = actions.get(k).copied().unwrap_or(Action::Hold);
        cur = step_state(&cur, a, max_speed, &p.topology, p.clock.edge_dt_s);
        lanes.push(cur.lane);
        s.push(cur.s);
    }
    Track { id: start.id, lanes, s }
}

/// Runs the planner for one generation tick. `progress` receives elapsed
/// runtime in microseconds while the job runs.
pub fn edge_run_step(input: &PlannerInput, params: &EdgeParams, progress: Option<&AtomicU64>) -> EdgeOutput {
    let watch = Stopwatch::start(params.runtime_clock);
    if params.inject_delay_ms > 0.0 {
        loop {
            let ms = watch.runtime_ms();
            report(progress, ms);
            if ms >= params.inject_delay_ms {
                break;
            }
            std::hint::spin_loop();
        }
    }
    let planning_started = watch.runtime_ms();
    let horizon = params.clock.horizon_steps();
    let dt = params.clock.edge_dt_s;

    let mut metrics = EdgeMetrics {
        generation_tick: input.generation_tick,
        algorithm: params.algorithm.as_str().to_string(),
        n_vehicles: input.vehicles.len(),
        compensation_steps: input.skipped_steps,
        ..EdgeMetrics::default()
    };
    let mut output = EdgeOutput::default();

    if params.algorithm != EdgeAlgorithm::None && !input.vehicles.is_empty() {
        let (prefix, post) = predict_prefix(
            &input.vehicles,
            &input.previous,
            input.generation_tick,
            input.skipped_steps,
            params,
        );
        let n = input.vehicles.len();
        let mut clusters: Vec<Vec<usize>> = match params.algorithm {
            EdgeAlgorithm::JointAstar => vec![(0..n).collect()],
            _ => {
                let cap = params.cluster_capacity.max(1);
                let f = features(&post, params.topology.min_headway, params.cluster_on_target_velocity);
                cluster_vehicles(&f, cluster_count(n, cap), cap).expect("cluster count always fits")
            }
        };
        // Front clusters first, so followers plan around their leaders' plans.
        let front = |c: &Vec<usize>| c.iter().map(|i| post[*i].s).fold(f64::MIN, f64::max);
        clusters.sort_by(|a, b| front(b).total_cmp(&front(a)));
        metrics.cluster_sizes = clusters.iter().map(|c| c.len()).collect();

        let mut planned: Vec<Option<Vec<Action>>> = vec![None; n];
        let mut tracks: Vec<Track> = post
            .iter()
            .map(|s| Track::constant_velocity(s.id, s.lane, s.s, s.v, horizon, dt))
            .collect();
        let mut progress_cb = || {
            let ms = watch.runtime_ms();
            report(progress, ms);
            ms - planning_started > params.timeout_ms
        };
        for members in &clusters {
            if progress_cb() {
                metrics.timeout = true;
                continue;
            }
            let problem = Problem {
                agents: members
                    .iter()
                    .map(|i| Agent::from_state(&post[*i], input.vehicles[*i].max_speed, input.vehicles[*i].lane_changes))
                    .collect(),
                obstacles: (0..n)
                    .filter(|i| !members.contains(i))
                    .map(|i| tracks[i].clone())
                    .collect(),
                horizon,
                num_lanes: params.topology.num_lanes,
                min_headway: params.topology.min_headway,
                edge_dt_s: dt,
                max_expansions: params.max_expansions,
            };
            let plan = joint_astar_until(&problem, &mut progress_cb);
            metrics.expanded_nodes += plan.expanded;
            match plan.status {
                SearchStatus::TimedOut => {
                    metrics.timeout = true;
                    continue;
                }
                SearchStatus::Infeasible => {
                    metrics.infeasible_clusters += 1;
                    continue;
                }
                SearchStatus::Capped => metrics.capped_clusters += 1,
                SearchStatus::Optimal | SearchStatus::Truncated => {}
            }
            if !plan.has_actions() {
                continue;
            }
            for (slot, i) in members.iter().enumerate() {
                let acts = plan.actions[slot].clone();
                tracks[*i] = track_from_actions(&post[*i], &acts, input.vehicles[*i].max_speed, horizon, params);
                planned[*i] = Some(acts);
            }
        }

        let buffers: Vec<WaypointBuffer> = (0..n)
            .filter_map(|i| {
                let plan = planned[i].as_ref()?;
                let mut actions = prefix[i].clone();
                actions.extend_from_slice(plan);
                Some(generate_waypoints(
                    &input.vehicles[i].state,
                    &actions,
                    input.generation_tick,
                    input.skipped_steps,
                    params.topology.lane_width,
                    dt,
                ))
            })
            .collect();
        let (kept, violations) = validate_plan(buffers, &params.topology);
        metrics.plan_violations = violations.len();
        output.buffers = kept;
        output.violations = violations;
    }

    metrics.buffers = output.buffers.len();
    metrics.runtime_ms = watch.runtime_ms();
    metrics.wall_ms = watch.wall_ms();
    metrics.cpu_ms = watch.cpu_ms();
    report(progress, metrics.runtime_ms);
    output.metrics = metrics;
    output
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::PlanOrigin;

    fn params(algorithm: EdgeAlgorithm) -> EdgeParams {
        EdgeParams {
            algorithm,
            clock: SimClock::new(0.05, 0.2, 2.0).unwrap(),
            topology: HighwayTopology::default(),
            cluster_capacity: 3,
            cluster_on_target_velocity: false,
            max_expansions: 200_000,
            timeout_ms: 10_000.0,
            inject_delay_ms: 0.0,
            runtime_clock: RuntimeClock::ThreadCpu,
            staleness_threshold_ms: 400.0,
            lookahead_m: 100.0,
        }
    }

    fn pv(id: u32, lane: u32, s: f64, v: f64, target: f64) -> PlannerVehicle {
        PlannerVehicle {
            state: VehicleState {
                id,
                lane,
                s,
                v,
                v_target: target,
                v_anchor: 0.0,
                done: false,
            },
            max_speed: 40.0,
            lane_changes: true,
        }
    }

    #[test]
    fn compensation_floor() {
        let c = SimClock::new(0.05, 0.2, 2.0).unwrap();
        assert_eq!(compensation_steps(&c, 0.0), 1);
        assert_eq!(compensation_steps(&c, 51.0), 1);
        assert_eq!(compensation_steps(&c, 500.0), 3);
    }

    #[test]
    fn single_vehicle_buffer_shape() {
        let input = PlannerInput {
            generation_tick: 40,
            vehicles: vec![pv(0, 1, 0.0, 20.0, 25.0)],
            previous: Vec::new(),
            skipped_steps: 1,
        };
        let out = edge_run_step(&input, &params(EdgeAlgorithm::ClusteredAstar), None);
        assert_eq!(out.buffers.len(), 1);
        let b = &out.buffers[0];
        assert_eq!(b.points.len(), 11);
        assert_eq!(b.skipped_steps, 1);
        assert!(b.is_kinematically_consistent(0.2));
        // The greedy prefix accelerates; the plan then climbs to 25 and holds.
        assert_eq!(b.planned_speeds[0], 21.0);
        assert_eq!(*b.planned_speeds.last().unwrap(), 25.0);
        assert_eq!(out.metrics.cluster_sizes, vec![1]);
        assert!(!out.metrics.timeout);
    }

    #[test]
    fn prefix_follows_delivered_buffer() {
        let prev = WaypointBuffer {
            vehicle_id: 0,
            generation_tick: 36,
            delivery_tick: 38,
            skipped_steps: 1,
            origin: PlanOrigin {
                s: 0.0,
                lane: 1,
                v: 20.0,
            },
            points: (1..=11)
                .map(|k| crate::types::Waypoint::on_highway(k as f64 * 4.0, 1, 3.5))
                .collect(),
            planned_speeds: vec![20.0; 11],
        };
        let vehicles = vec![pv(0, 1, 4.0, 20.0, 25.0)];
        let (actions, post) = predict_prefix(&vehicles, &[prev], 40, 2, &params(EdgeAlgorithm::ClusteredAstar));
        assert_eq!(actions[0], vec![Action::Hold, Action::Hold]);
        assert_eq!(post[0].s, 12.0);
        let (greedy, _) = predict_prefix(&vehicles, &[], 40, 2, &params(EdgeAlgorithm::ClusteredAstar));
        assert_eq!(greedy[0], vec![Action::Accelerate, Action::Accelerate]);
    }

    #[test]
    fn none_algorithm_plans_nothing() {
        let input = PlannerInput {
            generation_tick: 0,
            vehicles: vec![pv(0, 0, 0.0, 0.0, 10.0)],
            previous: Vec::new(),
            skipped_steps: 1,
        };
        let out = edge_run_step(&input, &params(EdgeAlgorithm::None), None);
        assert!(out.buffers.is_empty());
        assert_eq!(out.metrics.algorithm, "NONE");
    }

    #[test]
    fn injected_delay_is_charged() {
        let mut p = params(EdgeAlgorithm::ClusteredAstar);
        p.inject_delay_ms = 30.0;
        let progress = AtomicU64::new(0);
        let input = PlannerInput {
            generation_tick: 0,
            vehicles: vec![pv(0, 0, 0.0, 10.0, 10.0)],
            previous: Vec::new(),
            skipped_steps: 1,
        };
        let out = edge_run_step(&input, &p, Some(&progress));
        assert!(out.metrics.runtime_ms >= 30.0);
        assert!(progress.load(Ordering::Acquire) >= 30_000);
        assert_eq!(out.buffers.len(), 1);
    }

    #[test]
    fn zero_budget_times_out() {
        let mut p = params(EdgeAlgorithm::JointAstar);
        p.timeout_ms = 0.0;
        p.runtime_clock = RuntimeClock::Wall;
        let vehicles: Vec<PlannerVehicle> = (0..4).map(|i| pv(i, i % 4, i as f64 * 10.0, 0.0, 30.0)).collect();
        let input = PlannerInput {
            generation_tick: 0,
            vehicles,
            previous: Vec::new(),
            skipped_steps: 1,
        };
        let out = edge_run_step(&input, &p, None);
        assert!(out.metrics.timeout);
        assert!(out.buffers.is_empty());
    }

    #[test]
    fn clustered_plans_are_headway_safe() {
        let vehicles: Vec<PlannerVehicle> = (0..6)
            .map(|i| pv(i, (i % 2) as u32, i as f64 * 9.0, 10.0, 20.0))
            .collect();
        let input = PlannerInput {
            generation_tick: 0,
            vehicles,
            previous: Vec::new(),
            skipped_steps: 1,
        };
        let out = edge_run_step(&input, &params(EdgeAlgorithm::ClusteredAstar), None);
        assert!(out.violations.is_empty(), "{:?}", out.violations);
        assert_eq!(out.metrics.cluster_sizes.iter().sum::<usize>(), 6);
        assert!(out.metrics.cluster_sizes.iter().all(|c| *c <= 3));
    }
}
