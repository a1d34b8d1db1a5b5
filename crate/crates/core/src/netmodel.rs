//! Per-event latency models for the V2X channels.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::Position;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetModelError {
    #[error("latency parameter {name} must be >= 0, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("uniform latency needs lo <= hi, got lo={lo} hi={hi}")]
    InvertedRange { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LatencyModel {
    Constant { latency_ms: f64 },
    Uniform { lo_ms: f64, hi_ms: f64 },
    Distance { base_ms: f64, ms_per_km: f64 },
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel::Constant { latency_ms: 0.0 }
    }
}

impl LatencyModel {
    pub fn validate(&self) -> Result<(), NetModelError> {
        let check = |name: &'static str, value: f64| {
            if value >= 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(NetModelError::Negative { name, value })
            }
        };
        match *self {
            LatencyModel::Constant { latency_ms } => check("latency_ms", latency_ms),
            LatencyModel::Uniform { lo_ms, hi_ms } => {
                check("lo_ms", lo_ms)?;
                check("hi_ms", hi_ms)?;
                if lo_ms > hi_ms {
                    return Err(NetModelError::InvertedRange {
                        lo: lo_ms,
                        hi: hi_ms,
                    });
                }
                Ok(())
            }
            LatencyModel::Distance { base_ms, ms_per_km } => {
                check("base_ms", base_ms)?;
                check("ms_per_km", ms_per_km)
            }
        }
    }

    /// Smallest latency the model can produce.
    pub fn lower_bound_ms(&self) -> f64 {
        match *self {
            LatencyModel::Constant { latency_ms } => latency_ms,
            LatencyModel::Uniform { lo_ms, .. } => lo_ms,
            LatencyModel::Distance { base_ms, .. } => base_ms,
        }
    }

    /// Latency an edge should plan around for a vehicle at `distance_m`.
    pub fn expected_ms(&self, distance_m: f64) -> f64 {
        match *self {
            LatencyModel::Constant { latency_ms } => latency_ms,
            LatencyModel::Uniform { lo_ms, hi_ms } => 0.5 * (lo_ms + hi_ms),
            LatencyModel::Distance { base_ms, ms_per_km } => base_ms + ms_per_km * distance_m / 1000.0,
        }
    }
}

/// One directional channel: a model plus its own seeded draw sequence.
#[derive(Debug)]
pub struct Channel {
    model: LatencyModel,
    rng: Mutex<ChaCha8Rng>,
}

impl Channel {
    pub fn new(model: LatencyModel, seed: u64) -> Result<Self, NetModelError> {
        model.validate()?;
        Ok(Self {
            model,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        })
    }

    pub fn model(&self) -> &LatencyModel {
        &self.model
    }

    pub fn sample(&self, src: Position, dst: Position) -> f64 {
        match self.model {
            LatencyModel::Constant { latency_ms } => latency_ms,
            LatencyModel::Uniform { lo_ms, hi_ms } => {
                let mut rng = self.rng.lock().expect("latency rng poisoned");
                if lo_ms == hi_ms {
                    lo_ms
                } else {
                    rng.gen_range(lo_ms..=hi_ms)
                }
            }
            LatencyModel::Distance { base_ms, ms_per_km } => {
                base_ms + ms_per_km * src.distance_m(&dst) / 1000.0
            }
        }
    }
}
