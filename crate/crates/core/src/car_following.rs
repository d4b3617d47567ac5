//! Speed-based car-following governor and Van Aerde steady-state utilities.
//!
//! Every vehicle's next-step speed is bounded by the minimum of three
//! branches: (i) the acceleration limit, (ii) the Van Aerde steady-state
//! speed implied by the projected spacing, and (iii) a collision-avoidance
//! speed that guarantees the follower can always decelerate to the lead's
//! speed without the spacing falling below jam spacing.
//!
//! Branch (ii) is evaluated in km/h–km space: the fundamental-diagram
//! constants are only dimensionally coherent in those units. Conversion
//! happens at the operation boundary; everything else is SI.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::kmh_to_mps;

/// Tolerance below which a negative steady-state radicand is treated as
/// floating-point dust and clamped to zero; anything lower is a hard error.
const RADICAND_GUARD: f64 = -1e-9;

/// Per-link fundamental-diagram parameters and geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkFundamental {
    /// Free-flow speed, km/h.
    pub free_flow_kmh: f64,
    /// Speed at capacity, km/h.
    pub capacity_speed_kmh: f64,
    /// Saturation flow, veh/h/lane.
    pub saturation_flow_vphpl: f64,
    /// Jam density, veh/km/lane.
    pub jam_density_vpkmpl: f64,
    /// Roadway grade, rise/run, signed.
    pub grade: f64,
    /// Link length, m.
    pub length_m: f64,
}

impl Default for LinkFundamental {
    fn default() -> Self {
        LinkFundamental {
            free_flow_kmh: 100.0,
            capacity_speed_kmh: 85.0,
            saturation_flow_vphpl: 2480.0,
            jam_density_vpkmpl: 180.0,
            grade: 0.0,
            length_m: 500.0,
        }
    }
}

impl LinkFundamental {
    /// Free-flow speed in m/s.
    #[inline]
    pub fn free_flow_mps(&self) -> f64 {
        kmh_to_mps(self.free_flow_kmh)
    }

    /// Jam spacing (front-to-front distance headway at standstill), m.
    #[inline]
    pub fn jam_spacing_m(&self) -> f64 {
        1000.0 / self.jam_density_vpkmpl
    }

    /// Check the structural invariants, naming the offending field. The
    /// derived-constant check (`c3 > 0`) runs as part of this.
    pub fn validate(&self, field_prefix: &str) -> Result<(), crate::ConfigError> {
        use crate::ConfigError;
        let f = |name: &str| format!("{field_prefix}.{name}");
        if !(self.capacity_speed_kmh > 0.0 && self.capacity_speed_kmh < self.free_flow_kmh) {
            return Err(ConfigError::invalid(
                &f("capacity_speed_kmh"),
                "must satisfy 0 < v_c < free_flow_kmh",
            ));
        }
        if !(self.saturation_flow_vphpl > 0.0) {
            return Err(ConfigError::invalid(
                &f("saturation_flow_vphpl"),
                "must be strictly positive",
            ));
        }
        if !(self.jam_density_vpkmpl > 0.0) {
            return Err(ConfigError::invalid(
                &f("jam_density_vpkmpl"),
                "must be strictly positive",
            ));
        }
        if !(self.length_m > 0.0) {
            return Err(ConfigError::invalid(
                &f("length_m"),
                "must be strictly positive",
            ));
        }
        if !(self.grade.abs() < 0.25) {
            return Err(ConfigError::invalid(
                &f("grade"),
                "must satisfy |grade| < 0.25",
            ));
        }
        van_aerde_constants(self)
            .map(|_| ())
            .map_err(|e| ConfigError::invalid(field_prefix, e.to_string()))
    }
}

/// Van Aerde speed–spacing constants: `s(v) = c1 + c2/(v_f − v) + c3·v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VanAerdeConstants {
    /// km.
    pub c1: f64,
    /// km^2/h.
    pub c2: f64,
    /// h.
    pub c3: f64,
}

/// Derive the Van Aerde constants from a fundamental diagram.
///
/// Satisfies the jam identity `c1 + c2/v_f = 1/k_j` exactly and the capacity
/// identity `v_c / s(v_c) = q_c` exactly. Errors when the diagram is
/// degenerate (`c3 <= 0` or `c1 < 0`).
pub fn van_aerde_constants(fund: &LinkFundamental) -> Result<VanAerdeConstants, ModelError> {
    let v_f = fund.free_flow_kmh;
    let v_c = fund.capacity_speed_kmh;
    let m = v_f / (fund.jam_density_vpkmpl * v_c * v_c);
    let c1 = m * (2.0 * v_c - v_f);
    let c2 = m * (v_c - v_f) * (v_c - v_f);
    let c3 = 1.0 / fund.saturation_flow_vphpl - m;
    if c3 <= 0.0 {
        return Err(ModelError::InconsistentFundamental(format!(
            "c3 = {c3} <= 0 (saturation flow too high for v_f, v_c, k_j)"
        )));
    }
    if c1 < 0.0 {
        return Err(ModelError::InconsistentFundamental(format!(
            "c1 = {c1} < 0 (requires v_c > v_f / 2)"
        )));
    }
    Ok(VanAerdeConstants { c1, c2, c3 })
}

/// Equilibrium spacing at speed `v_kmh`, km. Diverges at free flow.
pub fn steady_state_spacing(
    k: &VanAerdeConstants,
    fund: &LinkFundamental,
    v_kmh: f64,
) -> Result<f64, ModelError> {
    if v_kmh >= fund.free_flow_kmh {
        return Err(ModelError::SpacingDiverges {
            v_kmh,
            v_f_kmh: fund.free_flow_kmh,
        });
    }
    Ok(k.c1 + k.c2 / (fund.free_flow_kmh - v_kmh) + k.c3 * v_kmh)
}

/// Steady-state speed implied by a spacing, km/h: the congested root of the
/// Van Aerde speed–spacing quadratic, floored at zero.
///
/// The radicand is bounded below by `4·c3·c2 > 0` for exact inputs; a value
/// below the numerical guard signals corrupted constants.
pub fn steady_state_speed(
    k: &VanAerdeConstants,
    fund: &LinkFundamental,
    spacing_km: f64,
) -> Result<f64, ModelError> {
    let v_f = fund.free_flow_kmh;
    let n = spacing_km + k.c3 * v_f - k.c1;
    let radicand = n * n - 4.0 * k.c3 * (spacing_km * v_f - k.c1 * v_f - k.c2);
    if radicand < RADICAND_GUARD {
        return Err(ModelError::NegativeRadicand(radicand));
    }
    let v = (n - radicand.max(0.0).sqrt()) / (2.0 * k.c3);
    Ok(v.max(0.0))
}

/// Project the spacing to the next step from the current relative motion:
/// `s' = s + (v_lead − v_n)·dt + a_lead·dt²/2`.
#[inline]
pub fn project_spacing(s_now_m: f64, v_n: f64, v_lead: f64, a_lead: f64, dt: f64) -> f64 {
    debug_assert!(dt > 0.0);
    s_now_m + (v_lead - v_n) * dt + 0.5 * a_lead * dt * dt
}

/// Collision-avoidance speed bound, m/s: the fastest the follower may go
/// next step while still being able to decelerate at `b_desired` to the
/// lead's projected speed without spacing dropping below jam.
#[inline]
pub fn collision_avoidance_speed(
    v_lead_next: f64,
    s_next_m: f64,
    jam_spacing_m: f64,
    b_desired: f64,
) -> f64 {
    let radicand = v_lead_next * v_lead_next + 2.0 * b_desired * (s_next_m - jam_spacing_m);
    radicand.max(0.0).sqrt()
}

/// Kinematic state of the vehicle ahead, as seen by a follower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeadState {
    /// Position, m.
    pub x: f64,
    /// Speed, m/s.
    pub v: f64,
    /// Acceleration, m/s^2.
    pub a: f64,
}

impl LeadState {
    /// Speed one step ahead, floored at zero.
    #[inline]
    pub fn projected_speed(&self, dt: f64) -> f64 {
        (self.v + self.a * dt).max(0.0)
    }
}

/// The full three-branch speed governor: next-step speed for a vehicle at
/// (`x_n`, `v_n`) given its lead (or none), never negative and never above
/// `v_n + a_max·dt`.
///
/// With no lead the spacing branches are unbounded and the result is
/// additionally capped at free-flow speed.
#[allow(clippy::too_many_arguments)]
pub fn rpa_speed(
    v_n: f64,
    lead: Option<&LeadState>,
    x_n: f64,
    fund: &LinkFundamental,
    consts: &VanAerdeConstants,
    env_a_max: f64,
    b_desired: f64,
    dt: f64,
) -> Result<f64, ModelError> {
    debug_assert!(dt > 0.0);
    let accel_branch = v_n + env_a_max * dt;
    let v_next = match lead {
        None => accel_branch.min(fund.free_flow_mps()),
        Some(lead) => {
            let s_next = project_spacing(lead.x - x_n, v_n, lead.v, lead.a, dt);
            let steady =
                kmh_to_mps(steady_state_speed(consts, fund, s_next / 1000.0)?);
            let avoid = collision_avoidance_speed(
                lead.projected_speed(dt),
                s_next,
                fund.jam_spacing_m(),
                b_desired,
            );
            accel_branch.min(steady).min(avoid)
        }
    };
    Ok(v_next.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn fund() -> LinkFundamental {
        LinkFundamental::default()
    }

    /// Independent oracle for the derived constants: the jam and capacity
    /// identities must hold exactly, not just the frozen literals.
    #[test]
    fn constants_satisfy_jam_and_capacity_identities() {
        let f = fund();
        let k = van_aerde_constants(&f).unwrap();
        assert_relative_eq!(k.c1, 5.382545174932718e-3, max_relative = 1e-9);
        assert_relative_eq!(k.c2, 1.730103806228374e-2, max_relative = 1e-9);
        assert_relative_eq!(k.c3, 3.263323039525741e-4, max_relative = 1e-9);

        // s(0) = 1/k_j
        let s0 = steady_state_spacing(&k, &f, 0.0).unwrap();
        assert_relative_eq!(s0, 1.0 / 180.0, max_relative = 1e-12);
        // v_c / s(v_c) = q_c
        let s_c = steady_state_spacing(&k, &f, 85.0).unwrap();
        assert_relative_eq!(85.0 / s_c, 2480.0, max_relative = 1e-9);
    }

    #[test]
    fn degenerate_capacity_speed_zeroes_c2() {
        let mut f = fund();
        f.capacity_speed_kmh = f.free_flow_kmh;
        let k = van_aerde_constants(&f).unwrap();
        assert_eq!(k.c2, 0.0);
    }

    #[test]
    fn spacing_errors_at_free_flow() {
        let f = fund();
        let k = van_aerde_constants(&f).unwrap();
        assert!(matches!(
            steady_state_spacing(&k, &f, 100.0),
            Err(ModelError::SpacingDiverges { .. })
        ));
    }

    #[test]
    fn speed_from_spacing_inverts_spacing() {
        let f = fund();
        let k = van_aerde_constants(&f).unwrap();
        for v in [0.0, 10.0, 42.5, 85.0, 99.0] {
            let s = steady_state_spacing(&k, &f, v).unwrap();
            let back = steady_state_speed(&k, &f, s).unwrap();
            assert_relative_eq!(back, v, max_relative = 1e-9, epsilon = 1e-9);
        }
        // Below-jam spacing maps to a standstill.
        assert_eq!(steady_state_speed(&k, &f, 0.004).unwrap(), 0.0);
    }

    #[test]
    fn project_spacing_cases() {
        assert_eq!(project_spacing(20.0, 25.0, 25.0, 0.0, 0.1), 20.0);
        assert_relative_eq!(
            project_spacing(20.0, 25.0, 20.0, 0.0, 0.1),
            19.5,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            project_spacing(20.0, 25.0, 20.0, 2.0, 0.1),
            19.51,
            max_relative = 1e-12
        );
    }

    #[test]
    fn governor_free_flow_without_lead() {
        let f = fund();
        let k = van_aerde_constants(&f).unwrap();
        let v_f = f.free_flow_mps();
        let v = rpa_speed(v_f, None, 0.0, &f, &k, 2.9, 3.0, 0.1).unwrap();
        assert_eq!(v, v_f);
    }

    #[test]
    fn governor_accel_branch_with_distant_lead() {
        let f = fund();
        let k = van_aerde_constants(&f).unwrap();
        let lead = LeadState {
            x: 5000.0,
            v: f.free_flow_mps(),
            a: 0.0,
        };
        let v = rpa_speed(10.0, Some(&lead), 0.0, &f, &k, 2.902, 3.0, 0.1).unwrap();
        assert_relative_eq!(v, 10.2902, max_relative = 1e-12);
    }

    #[test]
    fn governor_stops_at_jam_spacing_behind_stopped_lead() {
        let f = fund();
        let k = van_aerde_constants(&f).unwrap();
        let lead = LeadState {
            x: f.jam_spacing_m(),
            v: 0.0,
            a: 0.0,
        };
        let v = rpa_speed(0.0, Some(&lead), 0.0, &f, &k, 2.9, 3.0, 0.1).unwrap();
        assert_eq!(v, 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn jam_identity_for_valid_diagrams(
                v_f in 60.0f64..140.0,
                ratio in 0.55f64..0.95,
                q_c in 1200.0f64..2800.0,
                k_j in 100.0f64..220.0,
            ) {
                let f = LinkFundamental {
                    free_flow_kmh: v_f,
                    capacity_speed_kmh: ratio * v_f,
                    saturation_flow_vphpl: q_c,
                    jam_density_vpkmpl: k_j,
                    ..LinkFundamental::default()
                };
                if let Ok(k) = van_aerde_constants(&f) {
                    let lhs = k.c1 + k.c2 / f.free_flow_kmh;
                    prop_assert!((lhs - 1.0 / k_j).abs() <= 1e-12 * (1.0 / k_j));
                }
            }

            #[test]
            fn governor_bounds(
                v_n in 0.0f64..32.0,
                gap in 6.0f64..400.0,
                v_l in 0.0f64..30.0,
                a_l in -5.0f64..3.0,
            ) {
                let f = LinkFundamental::default();
                let k = van_aerde_constants(&f).unwrap();
                let lead = LeadState { x: gap, v: v_l, a: a_l };
                let a_max = 2.9;
                let dt = 0.1;
                let v = rpa_speed(v_n, Some(&lead), 0.0, &f, &k, a_max, 3.0, dt).unwrap();
                prop_assert!(v >= 0.0);
                prop_assert!(v <= v_n + a_max * dt + 1e-12);
            }

            #[test]
            fn steady_radicand_positive(s_km in 0.002f64..2.0) {
                let f = LinkFundamental::default();
                let k = van_aerde_constants(&f).unwrap();
                // The radicand is (s - (c1 + c3 v_f))^2 + 4 c3 c2 >= 4 c3 c2.
                let n = s_km + k.c3 * f.free_flow_kmh - k.c1;
                let rad = n * n - 4.0 * k.c3 * (s_km * f.free_flow_kmh - k.c1 * f.free_flow_kmh - k.c2);
                prop_assert!(rad >= 4.0 * k.c3 * k.c2 - 1e-15);
                prop_assert!(steady_state_speed(&k, &f, s_km).is_ok());
            }
        }
    }
}
