//! Simulation clock. Time is always derived from the tick counter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

const RATIO_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClockError {
    #[error("world_dt_s must be positive, got {0}")]
    NonPositiveWorldDt(f64),
    #[error("edge_dt_s ({edge}) is not an integer multiple of world_dt_s ({world})")]
    EdgeNotMultiple { edge: f64, world: f64 },
    #[error("search_dt_s ({search}) is not an integer multiple of edge_dt_s ({edge})")]
    SearchNotMultiple { search: f64, edge: f64 },
}

/// Fixed-step clock shared by the world, clients and the edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub tick: u64,
    pub world_dt_s: f64,
    pub edge_dt_s: f64,
    pub search_dt_s: f64,
}

fn integer_ratio(num: f64, den: f64) -> Option<u64> {
    let ratio = num / den;
    let rounded = ratio.round();
    if rounded >= 1.0 && (ratio - rounded).abs() <= RATIO_TOLERANCE * rounded {
        Some(rounded as u64)
    } else {
        None
    }
}

impl SimClock {
    pub fn new(world_dt_s: f64, edge_dt_s: f64, search_dt_s: f64) -> Result<Self, ClockError> {
        if !(world_dt_s > 0.0) || !world_dt_s.is_finite() {
            return Err(ClockError::NonPositiveWorldDt(world_dt_s));
        }
        if integer_ratio(edge_dt_s, world_dt_s).is_none() {
            return Err(ClockError::EdgeNotMultiple {
                edge: edge_dt_s,
                world: world_dt_s,
            });
        }
        if integer_ratio(search_dt_s, edge_dt_s).is_none() {
            return Err(ClockError::SearchNotMultiple {
                search: search_dt_s,
                edge: edge_dt_s,
            });
        }
        Ok(Self {
            tick: 0,
            world_dt_s,
            edge_dt_s,
            search_dt_s,
        })
    }

    pub fn at(mut self, tick: u64) -> Self {
        self.tick = tick;
        self
    }

    pub fn sim_time_s(&self) -> f64 {
        self.time_at(self.tick)
    }

    pub fn time_at(&self, tick: u64) -> f64 {
        tick as f64 * self.world_dt_s
    }

    pub fn world_dt_ms(&self) -> f64 {
        self.world_dt_s * 1000.0
    }

    pub fn edge_dt_ms(&self) -> f64 {
        self.edge_dt_s * 1000.0
    }

    /// Number of world ticks in one edge planning step.
    pub fn ticks_per_edge_step(&self) -> u64 {
        integer_ratio(self.edge_dt_s, self.world_dt_s).expect("validated at construction")
    }

    /// Planning horizon in edge steps.
    pub fn horizon_steps(&self) -> u32 {
        integer_ratio(self.search_dt_s, self.edge_dt_s).expect("validated at construction") as u32
    }

    pub fn is_edge_boundary(&self, tick: u64) -> bool {
        tick % self.ticks_per_edge_step() == 0
    }

    /// Whole world ticks needed to cover `ms` of wall or network time.
    pub fn ticks_for_ms(&self, ms: f64) -> u64 {
        let ticks = ms / self.world_dt_ms();
        // 51 ms / 50 ms must round up, 100 ms / 50 ms must not.
        let rounded = ticks.round();
        if (ticks - rounded).abs() <= RATIO_TOLERANCE * rounded.max(1.0) {
            rounded as u64
        } else {
            ticks.ceil() as u64
        }
    }

    /// Whole edge steps needed to cover `ms`.
    pub fn edge_steps_for_ms(&self, ms: f64) -> u32 {
        let steps = ms / self.edge_dt_ms();
        let rounded = steps.round();
        if (steps - rounded).abs() <= RATIO_TOLERANCE * rounded.max(1.0) {
            rounded as u32
        } else {
            steps.ceil() as u32
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_per_edge_step_examples() {
        let c = SimClock::new(0.05, 0.200, 2.0).unwrap();
        assert_eq!(c.ticks_per_edge_step(), 4);
        assert_eq!(c.horizon_steps(), 10);
        let c = SimClock::new(0.2, 0.2, 2.0).unwrap();
        assert_eq!(c.ticks_per_edge_step(), 1);
        assert!(matches!(
            SimClock::new(0.03, 0.200, 2.0),
            Err(ClockError::EdgeNotMultiple { .. })
        ));
        assert!(matches!(
            SimClock::new(0.05, 0.2, 0.5),
            Err(ClockError::SearchNotMultiple { .. })
        ));
        assert!(SimClock::new(0.0, 0.2, 2.0).is_err());
    }

    #[test]
    fn time_is_derived() {
        let c = SimClock::new(0.05, 0.2, 2.0).unwrap();
        assert_eq!(c.at(2000).sim_time_s(), 2000.0 * 0.05);
        assert_eq!(c.at(7).sim_time_s(), c.at(7).sim_time_s());
        assert!(c.is_edge_boundary(0));
        assert!(c.is_edge_boundary(8));
        assert!(!c.is_edge_boundary(9));
    }

    #[test]
    fn ceil_to_ticks() {
        let c = SimClock::new(0.05, 0.2, 2.0).unwrap();
        assert_eq!(c.ticks_for_ms(0.0), 0);
        assert_eq!(c.ticks_for_ms(51.0), 2);
        assert_eq!(c.ticks_for_ms(500.0), 10);
        assert_eq!(c.ticks_for_ms(171.0), 4);
        assert_eq!(c.edge_steps_for_ms(51.0), 1);
        assert_eq!(c.edge_steps_for_ms(400.0), 2);
    }
}
