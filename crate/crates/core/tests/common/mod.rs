//! Test support: a brute-force reference for the joint lattice search and a
//! generator of small search instances.
#![allow(dead_code)]

use std::collections::HashMap;

use cavsim_core::edge::astar::{Action, Agent, Problem, Track};
use rand::Rng;

/// Joint state at a step boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub depth: u32,
    pub v: Vec<i32>,
    pub lanes: Vec<u32>,
    pub s: Vec<f64>,
}

impl JointState {
    pub fn root(p: &Problem) -> Self {
        Self {
            depth: 0,
            v: p.agents.iter().map(|a| a.v_index).collect(),
            lanes: p.agents.iter().map(|a| a.lane).collect(),
            s: p.agents.iter().map(|a| a.s).collect(),
        }
    }

    fn key(&self) -> (u32, Vec<i32>, Vec<u32>, Vec<u64>) {
        (
            self.depth,
            self.v.clone(),
            self.lanes.clone(),
            self.s.iter().map(|x| x.to_bits()).collect(),
        )
    }
}

const MOVES: [(i32, i32); 5] = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)];

fn as_action(m: (i32, i32)) -> Action {
    match m {
        (1, _) => Action::Accelerate,
        (-1, _) => Action::Decelerate,
        (_, 1) => Action::LaneLeft,
        (_, -1) => Action::LaneRight,
        _ => Action::Hold,
    }
}

fn as_move(a: Action) -> (i32, i32) {
    match a {
        Action::Hold => (0, 0),
        Action::Accelerate => (1, 0),
        Action::Decelerate => (-1, 0),
        Action::LaneLeft => (0, 1),
        Action::LaneRight => (0, -1),
    }
}

fn velocity(a: &Agent, index: i32) -> f64 {
    a.v_anchor + index as f64
}

/// Both ends of a step keep the headway and nobody passes through anybody.
fn clear(h: f64, a0: f64, a1: f64, b0: f64, b1: f64) -> bool {
    let (d0, d1) = (a0 - b0, a1 - b1);
    d0.abs() >= h && d1.abs() >= h && (d0 > 0.0) == (d1 > 0.0)
}

fn track_lane(t: &Track, step: usize) -> u32 {
    t.lanes[step.min(t.lanes.len() - 1)]
}

fn track_s(t: &Track, boundary: usize) -> f64 {
    t.s[boundary.min(t.s.len() - 1)]
}

pub fn root_feasible(p: &Problem) -> bool {
    for (i, a) in p.agents.iter().enumerate() {
        let v = velocity(a, a.v_index);
        if a.lane >= p.num_lanes || v < -1e-9 || v > a.max_speed + 1e-9 {
            return false;
        }
        for b in &p.agents[i + 1..] {
            if a.lane == b.lane && (a.s - b.s).abs() < p.min_headway {
                return false;
            }
        }
        for o in &p.obstacles {
            if track_lane(o, 0) == a.lane && (a.s - track_s(o, 0)).abs() < p.min_headway {
                return false;
            }
        }
    }
    true
}

/// One joint step; `None` if any move leaves the road or speed range or any
/// pair loses separation. Returns the successor and its step cost.
pub fn step(p: &Problem, st: &JointState, moves: &[(i32, i32)]) -> Option<(JointState, u64)> {
    let n = p.agents.len();
    let mut next = JointState {
        depth: st.depth + 1,
        v: Vec::with_capacity(n),
        lanes: Vec::with_capacity(n),
        s: Vec::with_capacity(n),
    };
    let mut cost = 0;
    for (i, (a, &(dv, dl))) in p.agents.iter().zip(moves).enumerate() {
        if dl != 0 && !a.lane_changes {
            return None;
        }
        let lane = st.lanes[i] as i64 + dl as i64;
        if lane < 0 || lane >= p.num_lanes as i64 {
            return None;
        }
        let vi = st.v[i] + dv;
        let v = velocity(a, vi);
        if v < -1e-9 || v > a.max_speed + 1e-9 {
            return None;
        }
        next.v.push(vi);
        next.lanes.push(lane as u32);
        next.s.push(st.s[i] + v * p.edge_dt_s);
        cost += (vi - a.target_index).unsigned_abs() as u64;
    }
    let k = st.depth as usize;
    for i in 0..n {
        for j in i + 1..n {
            if next.lanes[i] == next.lanes[j]
                && !clear(p.min_headway, st.s[i], next.s[i], st.s[j], next.s[j])
            {
                return None;
            }
        }
        for o in &p.obstacles {
            if track_lane(o, k) == next.lanes[i]
                && !clear(p.min_headway, st.s[i], next.s[i], track_s(o, k), track_s(o, k + 1))
            {
                return None;
            }
        }
    }
    Some((next, cost))
}

/// Every joint move, first vehicle slowest.
fn joint_moves(n: usize) -> Vec<Vec<(i32, i32)>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                MOVES.iter().map(move |m| {
                    let mut p = prefix.clone();
                    p.push(*m);
                    p
                })
            })
            .collect();
    }
    out
}

/// Exhaustive minimum cost-to-go over full-horizon completions, memoized on
/// the joint state.
pub struct Oracle<'a> {
    problem: &'a Problem,
    joints: Vec<Vec<(i32, i32)>>,
    memo: HashMap<(u32, Vec<i32>, Vec<u32>, Vec<u64>), Option<u64>>,
}

impl<'a> Oracle<'a> {
    pub fn new(problem: &'a Problem) -> Self {
        Self {
            problem,
            joints: joint_moves(problem.agents.len()),
            memo: HashMap::new(),
        }
    }

    pub fn remaining(&mut self, st: &JointState) -> Option<u64> {
        if st.depth == self.problem.horizon {
            return Some(0);
        }
        let key = st.key();
        if let Some(v) = self.memo.get(&key) {
            return *v;
        }
        let mut best: Option<u64> = None;
        for i in 0..self.joints.len() {
            let Some((next, c)) = step(self.problem, st, &self.joints[i]) else {
                continue;
            };
            if let Some(rest) = self.remaining(&next) {
                best = Some(best.map_or(c + rest, |b| b.min(c + rest)));
            }
        }
        self.memo.insert(key, best);
        best
    }

    /// Minimum total cost, or `None` when no feasible full-horizon plan exists.
    pub fn minimum(&mut self) -> Option<u64> {
        if !root_feasible(self.problem) {
            return None;
        }
        let root = JointState::root(self.problem);
        self.remaining(&root)
    }
}

/// Replays per-agent actions with the reference rules.
pub fn replay_cost(p: &Problem, actions: &[Vec<Action>]) -> Option<u64> {
    let steps = actions.first().map_or(0, |a| a.len());
    let mut st = JointState::root(p);
    let mut total = 0;
    for k in 0..steps {
        let moves: Vec<(i32, i32)> = actions.iter().map(|a| as_move(a[k])).collect();
        let (next, c) = step(p, &st, &moves)?;
        st = next;
        total += c;
    }
    Some(total)
}

/// Small instances: up to `max_agents` vehicles, target deviation at most
/// `max_dev` lattice units, horizon at most `max_h`.
pub fn random_problem(rng: &mut impl Rng, max_agents: usize, max_dev: i32, max_h: u32) -> Problem {
    let n = rng.gen_range(1..=max_agents);
    let num_lanes = rng.gen_range(1..=3);
    let edge_dt_s = if rng.gen_bool(0.5) { 0.2 } else { 1.0 };
    let agents = (0..n)
        .map(|i| {
            let v_anchor = if rng.gen_bool(0.3) { 0.4 } else { 0.0 };
            let v_index = rng.gen_range(0..=6);
            let target_index = (v_index + rng.gen_range(-max_dev..=max_dev)).max(0);
            Agent {
                id: i as u32,
                lane: rng.gen_range(0..num_lanes),
                s: if i == 0 { 0.0 } else { rng.gen_range(-16.0..16.0f64).round() },
                v_index,
                target_index,
                v_anchor,
                max_speed: v_anchor + rng.gen_range(v_index.max(3)..=10) as f64,
                lane_changes: rng.gen_bool(0.7),
            }
        })
        .collect();
    let horizon = rng.gen_range(1..=max_h);
    let obstacles = if rng.gen_bool(0.4) {
        vec![Track::constant_velocity(
            100,
            rng.gen_range(0..num_lanes),
            rng.gen_range(-20.0..30.0f64).round(),
            rng.gen_range(0..8) as f64,
            horizon,
            edge_dt_s,
        )]
    } else {
        Vec::new()
    };
    Problem {
        agents,
        obstacles,
        horizon,
        num_lanes,
        min_headway: 7.0,
        edge_dt_s,
        max_expansions: 10_000_000,
    }
}

pub fn moves_to_actions(moves: &[(i32, i32)]) -> Vec<Action> {
    moves.iter().copied().map(as_action).collect()
}
