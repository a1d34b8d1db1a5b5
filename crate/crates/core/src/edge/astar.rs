//! Joint A* over a cluster's velocity and lane lattice.
//!
//! A node holds every cluster vehicle's lattice velocity index, lane and
//! position. Each step a vehicle may hold, change velocity by one lattice
//! unit, or change lane by one; the joint action space is the product over
//! vehicles, enumerated in lexicographic order of [`Action::ALL`].

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::types::{Control, ControlSource, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Hold,
    Accelerate,
    Decelerate,
    /// Toward higher lane indices.
    LaneLeft,
    LaneRight,
}

impl Action {
    pub const ALL: [Action; 5] = [
        Action::Hold,
        Action::Accelerate,
        Action::Decelerate,
        Action::LaneLeft,
        Action::LaneRight,
    ];

    pub fn dv(self) -> i32 {
        match self {
            Action::Accelerate => 1,
            Action::Decelerate => -1,
            _ => 0,
        }
    }

    pub fn dlane(self) -> i32 {
        match self {
            Action::LaneLeft => 1,
            Action::LaneRight => -1,
            _ => 0,
        }
    }

    pub fn to_control(self, source: ControlSource) -> Control {
        match self {
            Action::Hold => Control::hold(source),
            Action::Accelerate => Control::accelerate(source),
            Action::Decelerate => Control::decelerate(source),
            Action::LaneLeft => Control::lane_change(1, source),
            Action::LaneRight => Control::lane_change(-1, source),
        }
    }

    pub fn from_control(control: &Control) -> Self {
        match (control.dv(), control.dlane()) {
            (1, _) => Action::Accelerate,
            (-1, _) => Action::Decelerate,
            (_, 1) => Action::LaneLeft,
            (_, -1) => Action::LaneRight,
            _ => Action::Hold,
        }
    }
}

/// A vehicle under the planner's control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Agent {
    pub id: u32,
    pub lane: u32,
    pub s: f64,
    pub v_index: i32,
    pub target_index: i32,
    pub v_anchor: f64,
    pub max_speed: f64,
    pub lane_changes: bool,
}

impl Agent {
    pub fn from_state(state: &VehicleState, max_speed: f64, lane_changes: bool) -> Self {
        Self {
            id: state.id,
            lane: state.lane,
            s: state.s,
            v_index: state.v_index(),
            target_index: state.target_index(),
            v_anchor: state.v_anchor,
            max_speed,
            lane_changes,
        }
    }

    pub fn velocity(&self, index: i32) -> f64 {
        self.v_anchor + index as f64
    }
}

/// Lane held during each step and position at each step boundary of a vehicle
/// the search does not control.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u32,
    pub lanes: Vec<u32>,
    pub s: Vec<f64>,
}

impl Track {
    pub fn constant_velocity(id: u32, lane: u32, s: f64, v: f64, steps: u32, edge_dt_s: f64) -> Self {
        let mut positions = Vec::with_capacity(steps as usize + 1);
        let mut x = s;
        positions.push(x);
        for _ in 0..steps {
            x += v * edge_dt_s;
            positions.push(x);
        }
        Self {
            id,
            lanes: vec![lane; steps as usize],
            s: positions,
        }
    }

    fn lane_at(&self, step: usize) -> u32 {
        self.lanes[step.min(self.lanes.len() - 1)]
    }

    fn s_at(&self, boundary: usize) -> f64 {
        self.s[boundary.min(self.s.len() - 1)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub agents: Vec<Agent>,
    pub obstacles: Vec<Track>,
    pub horizon: u32,
    pub num_lanes: u32,
    pub min_headway: f64,
    pub edge_dt_s: f64,
    pub max_expansions: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStatus {
    Optimal,
    /// Expansion cap hit; plan completed greedily from the deepest node.
    Capped,
    /// Every branch dead-ended before the horizon.
    Truncated,
    TimedOut,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Per agent, in problem order.
    pub actions: Vec<Vec<Action>>,
    pub cost: u64,
    pub expanded: u64,
    pub status: SearchStatus,
}

impl Plan {
    pub fn has_actions(&self) -> bool {
        self.actions.first().is_some_and(|a| !a.is_empty())
    }
}

/// An expanded node, recorded by the traced search.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub depth: u32,
    pub v_index: Vec<i32>,
    pub lanes: Vec<u32>,
    pub s: Vec<f64>,
    pub g: u64,
    pub h: u64,
}

/// Lower bound on the remaining cost of one vehicle `deviation` lattice units
/// from its target with `remaining` steps left.
pub fn vehicle_heuristic(deviation: u64, remaining: u64) -> u64 {
    let m = deviation.min(remaining);
    m * deviation - m * (m + 1) / 2
}

#[derive(Debug, Clone)]
struct Node {
    v: Vec<i32>,
    lanes: Vec<u32>,
    s: Vec<f64>,
    depth: u32,
    g: u64,
    parent: usize,
    joint: Vec<Action>,
}

type Key = (u32, Vec<i32>, Vec<u32>, Vec<u64>);

fn key_of(n: &Node) -> Key {
    (
        n.depth,
        n.v.clone(),
        n.lanes.clone(),
        n.s.iter().map(|x| x.to_bits()).collect(),
    )
}

const ROOT: usize = usize::MAX;
const STOP_CHECK_EVERY: u64 = 64;

impl Problem {
    fn h(&self, v: &[i32], depth: u32) -> u64 {
        let remaining = (self.horizon - depth) as u64;
        self.agents
            .iter()
            .zip(v)
            .map(|(a, vi)| vehicle_heuristic((vi - a.target_index).unsigned_abs() as u64, remaining))
            .sum()
    }

    fn pair_clear(&self, a0: f64, a1: f64, b0: f64, b1: f64) -> bool {
        let d0 = a0 - b0;
        let d1 = a1 - b1;
        d0.abs() >= self.min_headway && d1.abs() >= self.min_headway && (d0 > 0.0) == (d1 > 0.0)
    }

    fn root_ok(&self) -> bool {
        let n = self.agents.len();
        for (i, a) in self.agents.iter().enumerate() {
            let v = a.velocity(a.v_index);
            if a.lane >= self.num_lanes || v < -1e-9 || v > a.max_speed + 1e-9 {
                return false;
            }
            for b in &self.agents[i + 1..n] {
                if a.lane == b.lane && (a.s - b.s).abs() < self.min_headway {
                    return false;
                }
            }
            for o in &self.obstacles {
                if o.lane_at(0) == a.lane && (a.s - o.s_at(0)).abs() < self.min_headway {
                    return false;
                }
            }
        }
        true
    }

    /// Single-vehicle actions that respect road and speed bounds.
    fn agent_moves(&self, node: &Node, i: usize) -> Vec<Action> {
        let a = &self.agents[i];
        Action::ALL
            .iter()
            .copied()
            .filter(|act| {
                if act.dlane() != 0 {
                    if !a.lane_changes {
                        return false;
                    }
                    let lane = node.lanes[i] as i64 + act.dlane() as i64;
                    if lane < 0 || lane >= self.num_lanes as i64 {
                        return false;
                    }
                }
                let v = a.velocity(node.v[i] + act.dv());
                v >= -1e-9 && v <= a.max_speed + 1e-9
            })
            .collect()
    }

    /// Applies a joint action, returning the child and its step cost, or
    /// `None` if any pair of vehicles would come within the minimum headway.
    fn apply(&self, node: &Node, joint: &[Action]) -> Option<(Node, u64)> {
        let n = self.agents.len();
        let mut v = Vec::with_capacity(n);
        let mut lanes = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        let mut cost = 0u64;
        for (i, act) in joint.iter().enumerate() {
            let a = &self.agents[i];
            let vi = node.v[i] + act.dv();
            v.push(vi);
            lanes.push((node.lanes[i] as i64 + act.dlane() as i64) as u32);
            s.push(node.s[i] + a.velocity(vi) * self.edge_dt_s);
            cost += (vi - a.target_index).unsigned_abs() as u64;
        }
        for i in 0..n {
            for j in i + 1..n {
                if lanes[i] == lanes[j] && !self.pair_clear(node.s[i], s[i], node.s[j], s[j]) {
                    return None;
                }
            }
            let k = node.depth as usize;
            for o in &self.obstacles {
                if o.lane_at(k) == lanes[i] && !self.pair_clear(node.s[i], s[i], o.s_at(k), o.s_at(k + 1))
                {
                    return None;
                }
            }
        }
        Some((
            Node {
                v,
                lanes,
                s,
                depth: node.depth + 1,
                g: node.g + cost,
                parent: ROOT,
                joint: joint.to_vec(),
            },
            cost,
        ))
    }

    /// Feasible children in lexicographic joint-action order.
    fn successors(&self, node: &Node) -> Vec<(Node, u64)> {
        let moves: Vec<Vec<Action>> = (0..self.agents.len()).map(|i| self.agent_moves(node, i)).collect();
        if moves.iter().any(|m| m.is_empty()) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut digits = vec![0usize; moves.len()];
        let mut joint: Vec<Action> = moves.iter().map(|m| m[0]).collect();
        loop {
            if let Some(child) = self.apply(node, &joint) {
                out.push(child);
            }
            // Odometer increment, last vehicle fastest.
            let mut i = moves.len();
            loop {
                if i == 0 {
                    return out;
                }
                i -= 1;
                digits[i] += 1;
                if digits[i] < moves[i].len() {
                    joint[i] = moves[i][digits[i]];
                    break;
                }
                digits[i] = 0;
                joint[i] = moves[i][0];
            }
        }
    }

    fn hold_to_horizon(&self, node: &Node) -> Option<Vec<Node>> {
        let holds = vec![Action::Hold; self.agents.len()];
        let mut chain = Vec::new();
        let mut cur = node.clone();
        while cur.depth < self.horizon {
            let (next, _) = self.apply(&cur, &holds)?;
            chain.push(next.clone());
            cur = next;
        }
        Some(chain)
    }

    /// Extends `node` one cheapest step at a time until the horizon or a dead end.
    fn greedy_complete(&self, node: &Node) -> Vec<Node> {
        let mut chain = Vec::new();
        let mut cur = node.clone();
        while cur.depth < self.horizon {
            let best = self
                .successors(&cur)
                .into_iter()
                .min_by_key(|(child, _)| child.g + self.h(&child.v, child.depth));
            match best {
                Some((child, _)) => {
                    chain.push(child.clone());
                    cur = child;
                }
                None => break,
            }
        }
        chain
    }
}

/// Optimal joint plan for the problem's agents.
pub fn joint_astar(problem: &Problem) -> Plan {
    search(problem, &mut || false, None)
}

/// Like [`joint_astar`], also returning every expanded node with its
/// heuristic value.
pub fn joint_astar_traced(problem: &Problem) -> (Plan, Vec<TraceEntry>) {
    let mut trace = Vec::new();
    let plan = search(problem, &mut || false, Some(&mut trace));
    (plan, trace)
}

/// Search with a cooperative stop check, polled every few expansions.
pub fn joint_astar_until(problem: &Problem, should_stop: &mut dyn FnMut() -> bool) -> Plan {
    search(problem, should_stop, None)
}

fn empty_plan(problem: &Problem, expanded: u64, status: SearchStatus) -> Plan {
    Plan {
        actions: vec![Vec::new(); problem.agents.len()],
        cost: 0,
        expanded,
        status,
    }
}

fn search(
    problem: &Problem,
    should_stop: &mut dyn FnMut() -> bool,
    mut trace: Option<&mut Vec<TraceEntry>>,
) -> Plan {
    if problem.agents.is_empty() {
        return empty_plan(problem, 0, SearchStatus::Optimal);
    }
    if !problem.root_ok() {
        return empty_plan(problem, 0, SearchStatus::Infeasible);
    }
    let root = Node {
        v: problem.agents.iter().map(|a| a.v_index).collect(),
        lanes: problem.agents.iter().map(|a| a.lane).collect(),
        s: problem.agents.iter().map(|a| a.s).collect(),
        depth: 0,
        g: 0,
        parent: ROOT,
        joint: Vec::new(),
    };

    let mut nodes: Vec<Node> = Vec::new();
    let mut best_g: HashMap<Key, u64> = HashMap::new();
    let mut open: BinaryHeap<(Reverse<u64>, u64, Reverse<u64>, usize)> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut expanded = 0u64;
    // Deepest generated node, cheapest first, earliest on ties.
    let mut deepest = 0usize;

    best_g.insert(key_of(&root), 0);
    open.push((Reverse(problem.h(&root.v, 0)), 0, Reverse(seq), 0));
    nodes.push(root);

    while let Some((_, g, _, idx)) = open.pop() {
        if best_g.get(&key_of(&nodes[idx])).is_some_and(|best| *best < g) {
            continue;
        }
        if expanded > 0 && expanded % STOP_CHECK_EVERY == 0 && should_stop() {
            return empty_plan(problem, expanded, SearchStatus::TimedOut);
        }
        expanded += 1;
        let node = nodes[idx].clone();
        let h = problem.h(&node.v, node.depth);
        if let Some(t) = trace.as_deref_mut() {
            t.push(TraceEntry {
                depth: node.depth,
                v_index: node.v.clone(),
                lanes: node.lanes.clone(),
                s: node.s.clone(),
                g: node.g,
                h,
            });
        }
        if node.depth == problem.horizon {
            return finish(problem, &nodes, idx, Vec::new(), expanded, SearchStatus::Optimal);
        }
        if h == 0 && node.v.iter().zip(&problem.agents).all(|(v, a)| *v == a.target_index) {
            if let Some(tail) = problem.hold_to_horizon(&node) {
                return finish(problem, &nodes, idx, tail, expanded, SearchStatus::Optimal);
            }
        }
        if expanded >= problem.max_expansions {
            let tail = problem.greedy_complete(&nodes[deepest]);
            return finish(problem, &nodes, deepest, tail, expanded, SearchStatus::Capped);
        }
        for (mut child, _) in problem.successors(&node) {
            let key = key_of(&child);
            if best_g.get(&key).is_some_and(|best| *best <= child.g) {
                continue;
            }
            best_g.insert(key, child.g);
            child.parent = idx;
            seq += 1;
            let f = child.g + problem.h(&child.v, child.depth);
            let (cg, cd) = (child.g, child.depth);
            nodes.push(child);
            let ci = nodes.len() - 1;
            let d = &nodes[deepest];
            if cd > d.depth || (cd == d.depth && cg < d.g) {
                deepest = ci;
            }
            open.push((Reverse(f), cg, Reverse(seq), ci));
        }
    }
    if deepest == 0 {
        return empty_plan(problem, expanded, SearchStatus::Infeasible);
    }
    finish(problem, &nodes, deepest, Vec::new(), expanded, SearchStatus::Truncated)
}

fn finish(
    problem: &Problem,
    nodes: &[Node],
    last: usize,
    tail: Vec<Node>,
    expanded: u64,
    status: SearchStatus,
) -> Plan {
    let mut joints: Vec<&[Action]> = Vec::new();
    let mut idx = last;
    while idx != 0 && idx != ROOT {
        joints.push(&nodes[idx].joint);
        idx = nodes[idx].parent;
    }
    joints.reverse();
    joints.extend(tail.iter().map(|n| n.joint.as_slice()));
    let cost = tail.last().map(|n| n.g).unwrap_or(nodes[last].g);
    let mut actions = vec![Vec::with_capacity(joints.len()); problem.agents.len()];
    for joint in joints {
        for (i, a) in joint.iter().enumerate() {
            actions[i].push(*a);
        }
    }
    Plan {
        actions,
        cost,
        expanded,
        status,
    }
}

/// Cost of executing `actions` from the problem's root, or `None` if the
/// sequence leaves the feasible set.
pub fn plan_cost(problem: &Problem, actions: &[Vec<Action>]) -> Option<u64> {
    let mut node = Node {
        v: problem.agents.iter().map(|a| a.v_index).collect(),
        lanes: problem.agents.iter().map(|a| a.lane).collect(),
        s: problem.agents.iter().map(|a| a.s).collect(),
        depth: 0,
        g: 0,
        parent: ROOT,
        joint: Vec::new(),
    };
    let steps = actions.first().map(|a| a.len()).unwrap_or(0);
    for k in 0..steps {
        let joint: Vec<Action> = actions.iter().map(|a| a[k]).collect();
        for (i, act) in joint.iter().enumerate() {
            if !problem.agent_moves(&node, i).contains(act) {
                return None;
            }
        }
        node = problem.apply(&node, &joint)?.0;
    }
    Some(node.g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(id: u32, lane: u32, s: f64, v: i32, target: i32) -> Agent {
        Agent {
            id,
            lane,
            s,
            v_index: v,
            target_index: target,
            v_anchor: 0.0,
            max_speed: 40.0,
            lane_changes: true,
        }
    }

    fn problem(agents: Vec<Agent>, horizon: u32) -> Problem {
        Problem {
            agents,
            obstacles: Vec::new(),
            horizon,
            num_lanes: 4,
            min_headway: 7.0,
            edge_dt_s: 0.2,
            max_expansions: 1_000_000,
        }
    }

    #[test]
    fn single_vehicle_reaches_target() {
        let p = problem(vec![agent(0, 1, 0.0, 20, 23)], 10);
        let plan = joint_astar(&p);
        assert_eq!(plan.status, SearchStatus::Optimal);
        assert_eq!(plan.cost, 3);
        let mut expected = vec![Action::Accelerate; 3];
        expected.extend(vec![Action::Hold; 7]);
        assert_eq!(plan.actions[0], expected);
    }

    #[test]
    fn at_target_holds() {
        let p = problem(vec![agent(0, 0, 0.0, 15, 15)], 10);
        let plan = joint_astar(&p);
        assert_eq!(plan.cost, 0);
        assert_eq!(plan.actions[0], vec![Action::Hold; 10]);
    }

    #[test]
    fn heuristic_values() {
        assert_eq!(vehicle_heuristic(0, 10), 0);
        assert_eq!(vehicle_heuristic(3, 10), 3);
        assert_eq!(vehicle_heuristic(4, 2), 3 + 2);
        assert_eq!(vehicle_heuristic(5, 0), 0);
    }

    #[test]
    fn follower_changes_lane_around_slow_leader() {
        // Leader cruises at its target; the follower wants 5 m/s more.
        let p = problem(vec![agent(0, 1, 0.0, 10, 15), agent(1, 1, 9.0, 10, 10)], 6);
        let plan = joint_astar(&p);
        assert_eq!(plan.status, SearchStatus::Optimal);
        // Either vehicle may move over; one of them must.
        assert!(plan
            .actions
            .iter()
            .flatten()
            .any(|a| matches!(a, Action::LaneLeft | Action::LaneRight)));
        let mut same_lane = p.clone();
        same_lane.agents[0].lane_changes = false;
        same_lane.agents[1].lane_changes = false;
        assert!(plan.cost < joint_astar(&same_lane).cost);
        assert_eq!(plan_cost(&p, &plan.actions), Some(plan.cost));
    }

    #[test]
    fn infeasible_root() {
        let p = problem(vec![agent(0, 0, 0.0, 10, 12), agent(1, 0, 3.0, 10, 12)], 4);
        assert_eq!(joint_astar(&p).status, SearchStatus::Infeasible);
    }

    #[test]
    fn obstacle_blocks_lane() {
        // A stopped obstacle 12 m ahead in lane 0; the agent must not run into it.
        let mut p = problem(vec![agent(0, 0, 0.0, 10, 20)], 5);
        p.num_lanes = 1;
        p.obstacles.push(Track::constant_velocity(9, 0, 12.0, 0.0, 5, 0.2));
        let plan = joint_astar(&p);
        assert!(plan.has_actions() || plan.status == SearchStatus::Infeasible);
        if plan.has_actions() {
            let mut s = 0.0;
            let mut v = 10;
            for a in &plan.actions[0] {
                v += a.dv();
                s += v as f64 * 0.2;
                assert!(12.0 - s >= 7.0);
            }
        }
    }

    #[test]
    fn expansion_cap_completes_plan() {
        let mut p = problem(
            vec![agent(0, 0, 0.0, 0, 21), agent(1, 1, 0.0, 0, 21), agent(2, 2, 0.0, 0, 21)],
            10,
        );
        p.max_expansions = 3;
        let plan = joint_astar(&p);
        assert_eq!(plan.status, SearchStatus::Capped);
        assert_eq!(plan.actions[0].len(), 10);
        assert_eq!(plan_cost(&p, &plan.actions), Some(plan.cost));
    }

    #[test]
    fn stop_check_times_out() {
        let p = problem(
            vec![agent(0, 0, 0.0, 0, 21), agent(1, 0, 8.0, 0, 21), agent(2, 0, 16.0, 0, 5)],
            10,
        );
        let plan = joint_astar_until(&p, &mut || true);
        // Small searches may finish before the first poll.
        assert!(matches!(plan.status, SearchStatus::TimedOut | SearchStatus::Optimal));
    }

    #[test]
    fn deterministic() {
        let p = problem(
            vec![agent(0, 0, 0.0, 3, 12), agent(1, 0, 8.0, 2, 9), agent(2, 1, 4.0, 5, 5)],
            10,
        );
        assert_eq!(joint_astar(&p), joint_astar(&p));
    }
}
