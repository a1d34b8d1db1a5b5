//! Tick-synchronized simulation of connected vehicles.
//!
//! A manager process owns a deterministic kinematic highway, drives vehicle
//! clients in lockstep over a newline-delimited TCP protocol, and hosts an
//! edge planner whose outputs reach vehicles through a latency-emulating
//! V2X collector.
//!
//! The crate is organized bottom-up:
//!
//! * [`units`], [`clock`], [`types`] - shared domain values.
//! * [`world`] - the highway, control staging and safety monitoring.
//! * [`netmodel`], [`v2x`] - latency sampling and the time-indexed collector.
//! * [`protocol`] - wire envelopes and framing.
//! * [`edge`] - clustering, joint A*, validation and waypoint generation.
//! * [`client`] - the vehicle control loop (greedy and edge-following).
//! * [`manager`] - registration, the tick loop, barrier and edge scheduling.
//! * [`metrics`] - per-entity logs, aggregation, CSV and SVG output.
//! * [`config`] - scenario YAML loading and validation.

pub mod client;
pub mod clock;
pub mod config;
pub mod edge;
pub mod manager;
pub mod metrics;
pub mod netmodel;
pub mod protocol;
pub mod types;
pub mod units;
pub mod v2x;
pub mod world;

pub use clock::{ClockError, SimClock};
pub use types::{Control, ControlError, ControlSource, VehicleState, Waypoint, WaypointBuffer};
pub use units::{kph_to_mps, mps_to_kph};
