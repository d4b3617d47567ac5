//! Deterministic microscopic simulation of a highway corridor with
//! cooperative adaptive cruise control (CACC) platooning.
//!
//! The crate is organised around a fixed-step engine that advances every
//! vehicle once per time step:
//!
//! * [`dynamics`] — force balance and the acceleration feasibility envelope
//!   of a single vehicle.
//! * [`car_following`] — the speed-based car-following governor (acceleration
//!   limit, Van Aerde steady state, collision avoidance) that bounds every
//!   vehicle's speed, plus steady-state utilities.
//! * [`platooning`] — the constant time-gap controller and the dynamic
//!   platoon lifecycle (formation, joining with a speed boost, size caps,
//!   link-boundary splits).
//! * [`metrics`] — fuel, delay and travel-time accounting.
//! * [`engine`] — the simulation loop: spawning, constraint resolution,
//!   state integration, lifecycle bookkeeping.
//! * [`scenario`] — scenario file parsing, validation and presets.
//! * [`output`] — CSV / JSON artifact writers with byte-stable formatting.
//! * [`sweep`] — seeded market-penetration-rate sweeps.
//!
//! A single run is strictly single-threaded and fully determined by
//! `(config, seed)`. Sweeps fan out independent runs in parallel.

// Validation deliberately writes `!(x > 0.0)` so that NaN fails closed.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod car_following;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod output;
pub mod platooning;
pub mod scenario;
pub mod sweep;

pub use error::{ConfigError, ModelError, SimError};

/// km/h per m/s.
pub const KMH_PER_MPS: f64 = 3.6;

/// Convert a speed in m/s to km/h.
#[inline]
pub fn mps_to_kmh(v: f64) -> f64 {
    v * KMH_PER_MPS
}

/// Convert a speed in km/h to m/s.
#[inline]
pub fn kmh_to_mps(v: f64) -> f64 {
    v / KMH_PER_MPS
}
