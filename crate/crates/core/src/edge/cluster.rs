//! Capacity-constrained k-means.
//!
//! Each iteration solves the assignment of vehicles to `k * capacity` slots
//! exactly (Hungarian method), then moves every centroid to the mean of its
//! members, until the assignment stops changing.

use pathfinding::kuhn_munkres::kuhn_munkres_min;
use pathfinding::matrix::Matrix;
use thiserror::Error;

use crate::types::VehicleState;

pub const MAX_ITERATIONS: usize = 100;

/// Squared distances are compared at this resolution.
const COST_SCALE: f64 = 1e4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClusterError {
    #[error("cluster capacity must be at least 1")]
    ZeroCapacity,
    #[error("{k} clusters of capacity {capacity} cannot hold {n} vehicles")]
    Infeasible { n: usize, k: usize, capacity: usize },
}

/// Fewest clusters that can hold `n` vehicles.
pub fn cluster_count(n: usize, capacity: usize) -> usize {
    n.div_ceil(capacity.max(1))
}

/// Position along the road in headway units, optionally followed by the
/// target velocity.
pub fn features(states: &[VehicleState], min_headway: f64, with_target: bool) -> Vec<Vec<f64>> {
    states
        .iter()
        .map(|s| {
            let mut f = vec![s.s / min_headway];
            if with_target {
                f.push(s.v_target);
            }
            f
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Partitions `features` into `k` groups of at most `capacity` members.
/// Returns member indices per cluster, ascending.
pub fn cluster_vehicles(
    features: &[Vec<f64>],
    k: usize,
    capacity: usize,
) -> Result<Vec<Vec<usize>>, ClusterError> {
    let n = features.len();
    if capacity == 0 {
        return Err(ClusterError::ZeroCapacity);
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if k == 0 || k * capacity < n {
        return Err(ClusterError::Infeasible { n, k, capacity });
    }

    // Evenly spaced quantiles of the first feature seed the centroids.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| features[*a][0].total_cmp(&features[*b][0]).then(a.cmp(b)));
    let mut centroids: Vec<Vec<f64>> = (0..k)
        .map(|j| {
            let q = (((j as f64 + 0.5) * n as f64 / k as f64).floor() as usize).min(n - 1);
            features[order[q]].clone()
        })
        .collect();

    let slots = k * capacity;
    let tie_weight = (n * slots + 1) as i64;
    let mut assignment: Vec<usize> = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let costs = Matrix::from_fn(n, slots, |(row, slot)| {
            let d = sq_dist(&features[row], &centroids[slot / capacity]);
            (d * COST_SCALE).round() as i64 * tie_weight + slot as i64
        });
        let (_, slot_of) = kuhn_munkres_min(&costs);
        let next: Vec<usize> = slot_of.iter().map(|s| s / capacity).collect();
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
        for (j, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = (0..n)
                .filter(|i| assignment[*i] == j)
                .map(|i| &features[i])
                .collect();
            if members.is_empty() {
                continue;
            }
            for (d, c) in centroid.iter_mut().enumerate() {
                *c = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }

    let mut clusters = vec![Vec::new(); k];
    for (i, c) in assignment.iter().enumerate() {
        clusters[*c].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    Ok(clusters)
}
