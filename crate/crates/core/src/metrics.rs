//! Fuel, delay and travel-time accounting.
//!
//! Fuel uses a power-based rate model: the force the powertrain must
//! overcome, times speed, feeds a polynomial in power. Delay integrates the
//! relative speed deficit against the link's free-flow speed.

use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleParams;
use crate::error::ModelError;
use crate::platooning::VehicleId;
use crate::KMH_PER_MPS;

/// Vehicle equipment class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleClass {
    /// Class 1: never forms or joins platoons.
    NonCacc,
    /// Class 2: CACC-equipped, platoons where enabled.
    Cacc,
}

impl VehicleClass {
    /// Numeric code used in CSV output (1 = non-CACC, 2 = CACC).
    pub fn code(self) -> u8 {
        match self {
            VehicleClass::NonCacc => 1,
            VehicleClass::Cacc => 2,
        }
    }
}

/// Force the powertrain must overcome at (`v`, `a`) on grade `grade`, N.
///
/// `F = m·g·G + m·g·cosθ·C_r0·C_r2/1000 + m·a + m·g·cosθ·C_r0·C_r1·v_kmh/1000
///    + ρ·C_d·C_h·A_f·v²/2`, with θ = atan(G). Shares constants and scaling
/// with [`crate::dynamics::resistance_forces`], so the two agree exactly at
/// `a = 0`.
pub fn effective_force(p: &VehicleParams, v: f64, a: f64, grade: f64) -> f64 {
    debug_assert!(v >= 0.0);
    let cos_theta = grade.atan().cos();
    let normal = p.mass_kg * p.gravity_mps2 * cos_theta;
    let v_kmh = v * KMH_PER_MPS;
    p.mass_kg * p.gravity_mps2 * grade
        + normal * p.rolling_c0 * p.rolling_c2 / 1000.0
        + p.mass_kg * a
        + normal * p.rolling_c0 * p.rolling_c1_hpkm * v_kmh / 1000.0
        + crate::dynamics::aero_force(p, v)
}

/// Instantaneous power, kW, from force (N) and speed (m/s).
#[inline]
pub fn instantaneous_power_kw(f_e: f64, v: f64) -> f64 {
    debug_assert!(v >= 0.0);
    f_e * v / 1000.0
}

/// Fuel rate, L/s: `α0 + α1·P + α2·P² + α3·v`.
///
/// With `fuel_clamp_negative_power` set (the default), negative power is
/// clamped to zero and the rate is floored at the idle rate `α0`.
pub fn fuel_rate_lps(p: &VehicleParams, power_kw: f64, v: f64) -> f64 {
    let [a0, a1, a2, a3] = p.fuel_alpha;
    if p.fuel_clamp_negative_power {
        let pw = power_kw.max(0.0);
        (a0 + a1 * pw + a2 * pw * pw + a3 * v).max(a0)
    } else {
        a0 + a1 * power_kw + a2 * power_kw * power_kw + a3 * v
    }
}

/// Delay accrued over one step, s: `max(v_f − v, 0)/v_f · dt`.
///
/// Speeds above free flow (e.g. during a join boost) accrue zero delay, not
/// negative delay.
#[inline]
pub fn delay_increment(v: f64, v_f_link: f64, dt: f64) -> f64 {
    debug_assert!(v >= 0.0 && v_f_link > 0.0 && dt > 0.0);
    (v_f_link - v).max(0.0) / v_f_link * dt
}

/// Per-vehicle accumulated metrics for one completed trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub vehicle: VehicleId,
    pub class: VehicleClass,
    pub travel_time_s: f64,
    pub delay_s: f64,
    pub fuel_l: f64,
    pub distance_m: f64,
    pub time_in_platoon_s: f64,
    pub entry_s: f64,
    pub exit_s: f64,
}

/// Mean metrics over a set of completed trips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub trips: usize,
    pub travel_time_s: f64,
    pub delay_s: f64,
    pub fuel_l: f64,
}

/// Fleet-wide and per-class means over completed trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSummary {
    pub fleet: ClassMeans,
    pub cacc: Option<ClassMeans>,
    pub non_cacc: Option<ClassMeans>,
}

fn means(records: &[&MetricsRecord]) -> Option<ClassMeans> {
    if records.is_empty() {
        return None;
    }
    let n = records.len() as f64;
    Some(ClassMeans {
        trips: records.len(),
        travel_time_s: records.iter().map(|r| r.travel_time_s).sum::<f64>() / n,
        delay_s: records.iter().map(|r| r.delay_s).sum::<f64>() / n,
        fuel_l: records.iter().map(|r| r.fuel_l).sum::<f64>() / n,
    })
}

/// Aggregate completed trips into fleet and per-class means.
///
/// Errors when there are no completed trips at all.
pub fn aggregate(records: &[MetricsRecord]) -> Result<FleetSummary, ModelError> {
    if records.is_empty() {
        return Err(ModelError::NoCompletedTrips);
    }
    let all: Vec<&MetricsRecord> = records.iter().collect();
    let cacc: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.class == VehicleClass::Cacc)
        .collect();
    let non_cacc: Vec<&MetricsRecord> = records
        .iter()
        .filter(|r| r.class == VehicleClass::NonCacc)
        .collect();
    Ok(FleetSummary {
        fleet: means(&all).expect("records is non-empty"),
        cacc: means(&cacc),
        non_cacc: means(&non_cacc),
    })
}

/// Percentage changes of a treatment against a baseline; reductions come
/// out negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub travel_time_pct: f64,
    pub delay_pct: f64,
    pub fuel_pct: f64,
}

/// `100·(treatment − baseline)/baseline` per metric.
pub fn reductions(baseline: &ClassMeans, treatment: &ClassMeans) -> Reductions {
    let pct = |b: f64, t: f64| {
        if b == 0.0 {
            0.0
        } else {
            (t - b) / b * 100.0
        }
    };
    Reductions {
        travel_time_pct: pct(baseline.travel_time_s, treatment.travel_time_s),
        delay_pct: pct(baseline.delay_s, treatment.delay_s),
        fuel_pct: pct(baseline.fuel_l, treatment.fuel_l),
    }
}
