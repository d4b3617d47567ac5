//! Force balance and the acceleration feasibility envelope of a single
//! vehicle.
//!
//! All quantities are SI (m, s, kg, N) except where a field name says
//! otherwise; speeds entering the rolling-resistance term are converted to
//! km/h internally because its constant carries h/km units. Everything here
//! is a pure function of its inputs.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::KMH_PER_MPS;

/// Speed floor guarding the power-limited tractive branch, m/s. Below this
/// the friction branch dominates anyway.
pub const V_EPS: f64 = 0.1;

/// Static physical, propulsion and fuel parameters of a vehicle model.
///
/// The defaults describe a synthetic mid-size sedan. They are plausible but
/// deliberately *not* calibrated against any measured vehicle; treat the fuel
/// coefficients in particular as placeholders to be replaced per study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    /// Total vehicle mass, kg.
    pub mass_kg: f64,
    /// Mass on the tractive axle, kg.
    pub tractive_mass_kg: f64,
    /// Engine power, kW.
    pub power_kw: f64,
    /// Driveline efficiency, in (0, 1].
    pub driveline_efficiency: f64,
    /// Coefficient of road adhesion (friction), unitless.
    pub road_adhesion: f64,
    /// Air density, kg/m^3.
    pub air_density_kgpm3: f64,
    /// Aerodynamic drag coefficient, unitless.
    pub drag_coefficient: f64,
    /// Altitude correction factor, unitless.
    pub altitude_factor: f64,
    /// Frontal area, m^2.
    pub frontal_area_m2: f64,
    /// Rolling resistance constant (pavement type/condition), unitless.
    pub rolling_c0: f64,
    /// Second rolling resistance constant, h/km.
    pub rolling_c1_hpkm: f64,
    /// Third rolling resistance constant, unitless.
    pub rolling_c2: f64,
    /// Braking efficiency, in (0, 1].
    pub braking_efficiency: f64,
    /// Comfortable deceleration used by the collision-avoidance terms,
    /// m/s^2, strictly positive.
    pub desired_decel_mps2: f64,
    /// Gravitational acceleration, m/s^2.
    pub gravity_mps2: f64,
    /// Fuel-rate coefficients: [L/s, L/(s*kW), L/(s*kW^2), L/m].
    /// The defaults are synthetic and uncalibrated.
    pub fuel_alpha: [f64; 4],
    /// Clamp negative power to zero inside the fuel model (and floor the
    /// fuel rate at `fuel_alpha[0]`). Disable for sensitivity studies.
    pub fuel_clamp_negative_power: bool,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            mass_kg: 1500.0,
            tractive_mass_kg: 900.0,
            power_kw: 150.0,
            driveline_efficiency: 0.90,
            road_adhesion: 0.6,
            air_density_kgpm3: 1.2256,
            drag_coefficient: 0.28,
            altitude_factor: 1.0,
            frontal_area_m2: 2.3,
            rolling_c0: 1.75,
            rolling_c1_hpkm: 0.0328,
            rolling_c2: 4.575,
            braking_efficiency: 0.90,
            desired_decel_mps2: 3.0,
            gravity_mps2: 9.8066,
            fuel_alpha: [1.0e-3, 1.0e-4, 1.0e-8, 1.0e-5],
            fuel_clamp_negative_power: true,
        }
    }
}

impl VehicleParams {
    /// Check the structural invariants, naming the offending field.
    pub fn validate(&self) -> Result<(), crate::ConfigError> {
        use crate::ConfigError;
        let positive: [(&str, f64); 6] = [
            ("vehicle.mass_kg", self.mass_kg),
            ("vehicle.tractive_mass_kg", self.tractive_mass_kg),
            ("vehicle.power_kw", self.power_kw),
            ("vehicle.frontal_area_m2", self.frontal_area_m2),
            ("vehicle.desired_decel_mps2", self.desired_decel_mps2),
            ("vehicle.gravity_mps2", self.gravity_mps2),
        ];
        for (name, value) in positive {
            if !(value > 0.0) {
                return Err(ConfigError::invalid(name, "must be strictly positive"));
            }
        }
        if !(self.driveline_efficiency > 0.0 && self.driveline_efficiency <= 1.0) {
            return Err(ConfigError::invalid(
                "vehicle.driveline_efficiency",
                "must be in (0, 1]",
            ));
        }
        if !(self.braking_efficiency > 0.0 && self.braking_efficiency <= 1.0) {
            return Err(ConfigError::invalid(
                "vehicle.braking_efficiency",
                "must be in (0, 1]",
            ));
        }
        if self.tractive_mass_kg > self.mass_kg {
            return Err(ConfigError::invalid(
                "vehicle.tractive_mass_kg",
                "must not exceed vehicle.mass_kg",
            ));
        }
        if !(self.road_adhesion > 0.0) {
            return Err(ConfigError::invalid(
                "vehicle.road_adhesion",
                "must be strictly positive",
            ));
        }
        if !(self.air_density_kgpm3 > 0.0) {
            return Err(ConfigError::invalid(
                "vehicle.air_density_kgpm3",
                "must be strictly positive",
            ));
        }
        Ok(())
    }
}

/// Aerodynamic, rolling and grade resistance components, N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resistances {
    pub aero: f64,
    pub rolling: f64,
    pub grade: f64,
}

impl Resistances {
    #[inline]
    pub fn total(&self) -> f64 {
        self.aero + self.rolling + self.grade
    }
}

/// Acceleration feasibility bounds, m/s^2.
///
/// `a_max` may be negative on steep upgrades at high speed. `a_min` is the
/// friction-limited braking floor; `a_collision` is the braking level the
/// collision-avoidance constraint demands (0 when no braking is required).
/// `a_collision < a_min` is reported raw here and resolved by
/// [`clamp_accel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccelEnvelope {
    pub a_max: f64,
    pub a_min: f64,
    pub a_collision: f64,
}

/// Result of clamping a candidate acceleration into an [`AccelEnvelope`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampedAccel {
    pub accel: f64,
    /// Set when the demanded collision braking exceeds the physical braking
    /// limit (`a_collision < a_min`): an imminent-collision state the speed
    /// governor is supposed to prevent.
    pub infeasible: bool,
}

/// Tractive force at the wheels, N: the power-limited branch capped by the
/// friction limit on the tractive axle.
///
/// Speeds below [`V_EPS`] are clamped; the friction branch dominates there.
pub fn tractive_force(p: &VehicleParams, v: f64) -> f64 {
    debug_assert!(v >= 0.0);
    let power_limited = 1000.0 * p.driveline_efficiency * p.power_kw / v.max(V_EPS);
    let friction_limited = p.tractive_mass_kg * p.gravity_mps2 * p.road_adhesion;
    power_limited.min(friction_limited)
}

/// Aerodynamic drag at speed `v`, N.
#[inline]
pub fn aero_force(p: &VehicleParams, v: f64) -> f64 {
    0.5 * p.air_density_kgpm3 * p.drag_coefficient * p.altitude_factor * p.frontal_area_m2 * v * v
}

/// Resistance forces at speed `v` on grade `grade` (rise/run, signed).
///
/// The rolling term takes the speed in km/h (its constant carries h/km) and
/// acts on the grade-normal load `m*g*cos(atan G)`, scaled by 1/1000 to keep
/// it consistent with the fuel-side force balance.
pub fn resistance_forces(p: &VehicleParams, v: f64, grade: f64) -> Resistances {
    debug_assert!(v >= 0.0);
    let v_kmh = v * KMH_PER_MPS;
    let normal = p.mass_kg * p.gravity_mps2 * grade.atan().cos();
    Resistances {
        aero: aero_force(p, v),
        rolling: normal * p.rolling_c0 / 1000.0 * (p.rolling_c1_hpkm * v_kmh + p.rolling_c2),
        grade: p.mass_kg * p.gravity_mps2 * grade,
    }
}

/// The acceleration feasibility envelope at speed `v` on grade `grade`.
///
/// `b_kin` is the kinematic deceleration demand from [`kinematic_decel`]
/// (>= 0; pass 0 with no lead). Errors when `b_desired + g*G <= 0`, which
/// marks the scenario itself as invalid.
pub fn accel_envelope(
    p: &VehicleParams,
    v: f64,
    grade: f64,
    b_kin: f64,
) -> Result<AccelEnvelope, ModelError> {
    debug_assert!(v >= 0.0 && b_kin >= 0.0);
    let force = tractive_force(p, v);
    let resist = resistance_forces(p, v, grade);
    let a_max = (force - resist.total()) / p.mass_kg;
    let a_min = -(grade + 1.0) * p.gravity_mps2 * p.road_adhesion * p.braking_efficiency;
    let decel_denom = p.desired_decel_mps2 + p.gravity_mps2 * grade;
    if decel_denom <= 0.0 {
        return Err(ModelError::DegenerateDecel(decel_denom));
    }
    let a_collision = -(b_kin * b_kin) / decel_denom;
    Ok(AccelEnvelope {
        a_max,
        a_min,
        a_collision,
    })
}

/// Deceleration needed for a follower at (`x_n`, `v_n`) to match the lead's
/// speed while consuming no more than the gap beyond jam spacing `s_j`, m/s^2.
///
/// Zero when the follower is not closing. Errors on a non-positive gap,
/// which means collision detection upstream already failed.
pub fn kinematic_decel(
    x_n: f64,
    v_n: f64,
    x_lead: f64,
    v_lead: f64,
    s_j: f64,
) -> Result<f64, ModelError> {
    let gap = x_lead - x_n - s_j;
    if gap <= 0.0 {
        return Err(ModelError::NonPositiveGap { gap_m: gap });
    }
    let delta = v_n * v_n - v_lead * v_lead;
    Ok((delta + delta.abs()) / (4.0 * gap))
}

/// Clamp a candidate acceleration into the feasibility envelope.
///
/// Positive candidates are capped at `a_max`. Non-positive candidates must
/// brake at least `|a_collision|` and at most `|a_min|`; when that interval
/// is empty the physical limit wins and the result is flagged infeasible.
pub fn clamp_accel(a_cand: f64, env: &AccelEnvelope) -> ClampedAccel {
    if a_cand > 0.0 {
        ClampedAccel {
            accel: a_cand.min(env.a_max),
            infeasible: false,
        }
    } else if env.a_collision < env.a_min {
        ClampedAccel {
            accel: env.a_min,
            infeasible: true,
        }
    } else {
        ClampedAccel {
            accel: a_cand.clamp(env.a_min, env.a_collision),
            infeasible: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn params() -> VehicleParams {
        VehicleParams::default()
    }

    #[test]
    fn tractive_force_friction_branch_at_low_speed() {
        let p = params();
        let friction = p.tractive_mass_kg * p.gravity_mps2 * p.road_adhesion;
        assert_eq!(tractive_force(&p, 0.0), friction);
        assert_eq!(tractive_force(&p, 0.05), friction);
    }

    #[test]
    fn tractive_force_power_branch_at_speed() {
        let p = params();
        // 1000 * 0.9 * 150 / 27.78 vs 900 * 9.8066 * 0.6
        assert_relative_eq!(
            tractive_force(&p, 27.78),
            4859.611231101511,
            max_relative = 1e-12
        );
        // At 13.89 m/s the power branch (9719.2 N) exceeds the friction cap.
        assert_relative_eq!(tractive_force(&p, 13.89), 5295.564, max_relative = 1e-12);
    }

    #[test]
    fn resistances_at_zero_speed() {
        let p = params();
        let r = resistance_forces(&p, 0.0, 0.0);
        assert_eq!(r.aero, 0.0);
        assert_eq!(r.grade, 0.0);
        assert_relative_eq!(
            r.rolling,
            p.mass_kg * p.gravity_mps2 * p.rolling_c0 * p.rolling_c2 / 1000.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn resistances_at_highway_speed() {
        let p = params();
        let r = resistance_forces(&p, 27.78, 0.0);
        assert_relative_eq!(r.aero, 304.55736530688006, max_relative = 1e-12);
        assert_relative_eq!(r.rolling, 202.21271766108003, max_relative = 1e-12);
        assert_eq!(r.grade, 0.0);
    }

    #[test]
    fn grade_resistance() {
        let p = params();
        let r = resistance_forces(&p, 27.78, 0.05);
        assert_relative_eq!(r.grade, 735.495, max_relative = 1e-12);
    }

    #[test]
    fn envelope_at_highway_speed() {
        let p = params();
        let env = accel_envelope(&p, 27.78, 0.0, 0.0).unwrap();
        assert_relative_eq!(env.a_max, 2.9018940987557005, max_relative = 1e-12);
        assert_relative_eq!(env.a_min, -5.295564, max_relative = 1e-12);
        assert_eq!(env.a_collision, 0.0);
    }

    #[test]
    fn envelope_collision_term() {
        let p = params();
        let env = accel_envelope(&p, 20.0, 0.0, 5.0).unwrap();
        assert_relative_eq!(env.a_collision, -25.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn envelope_allows_negative_a_max_on_steep_upgrade() {
        // High speed on a steep climb: the power branch cannot hold the
        // grade, so the feasible upper bound itself is negative.
        let p = params();
        let env = accel_envelope(&p, 40.0, 0.24, 0.0).unwrap();
        assert!(env.a_max < 0.0, "a_max = {}", env.a_max);
    }

    #[test]
    fn envelope_rejects_degenerate_downgrade() {
        let p = params();
        // b_desired = 3.0, so g*G <= -3.0 degenerates the denominator.
        assert!(matches!(
            accel_envelope(&p, 10.0, -0.4, 1.0),
            Err(ModelError::DegenerateDecel(_))
        ));
    }

    #[test]
    fn kinematic_decel_cases() {
        // Equal speeds: no closing, no demand.
        assert_eq!(kinematic_decel(0.0, 25.0, 30.0, 25.0, 5.0).unwrap(), 0.0);
        // Closing: (900 - 400) / (2 * 50) = 5.
        let b = kinematic_decel(0.0, 30.0, 55.0, 20.0, 5.0).unwrap();
        assert_relative_eq!(b, 5.0, max_relative = 1e-12);
        // Opening: the ramp kills the numerator.
        assert_eq!(kinematic_decel(0.0, 20.0, 55.0, 30.0, 5.0).unwrap(), 0.0);
        // Overlap is an upstream failure.
        assert!(matches!(
            kinematic_decel(0.0, 10.0, 4.0, 10.0, 5.0),
            Err(ModelError::NonPositiveGap { .. })
        ));
    }

    #[test]
    fn clamp_accel_cases() {
        let env = AccelEnvelope {
            a_max: 2.902,
            a_min: -5.296,
            a_collision: 0.0,
        };
        let c = clamp_accel(1.0, &env);
        assert_eq!(c.accel, 1.0);
        assert!(!c.infeasible);
        assert_eq!(clamp_accel(5.0, &env).accel, 2.902);

        // Feasible braking interval: must brake at least |a_collision|.
        let env = AccelEnvelope {
            a_max: 2.902,
            a_min: -5.296,
            a_collision: -2.0,
        };
        assert_eq!(clamp_accel(-1.0, &env).accel, -2.0);
        assert_eq!(clamp_accel(-3.0, &env).accel, -3.0);
        assert_eq!(clamp_accel(-7.0, &env).accel, -5.296);

        // Infeasible ordering: physical limit wins and the state is flagged.
        let env = AccelEnvelope {
            a_max: 2.902,
            a_min: -5.296,
            a_collision: -25.0 / 3.0,
        };
        let c = clamp_accel(-1.0, &env);
        assert_eq!(c.accel, -5.296);
        assert!(c.infeasible);
    }

    #[test]
    fn effective_force_matches_resistances_at_zero_accel() {
        // The fuel-side force balance shares constants and scaling with the
        // resistance terms; cross-checked here and in the metrics module.
        let p = params();
        for &(v, g) in &[(0.0, 0.0), (27.78, 0.0), (13.89, 0.05), (22.0, -0.03)] {
            let r = resistance_forces(&p, v, g);
            let f = crate::metrics::effective_force(&p, v, 0.0, g);
            assert_relative_eq!(f, r.total(), max_relative = 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tractive_non_increasing_and_bounded(
                v1 in 0.1f64..60.0,
                dv in 0.0f64..30.0,
            ) {
                let p = params();
                let cap = p.tractive_mass_kg * p.gravity_mps2 * p.road_adhesion;
                let f1 = tractive_force(&p, v1);
                let f2 = tractive_force(&p, v1 + dv);
                prop_assert!(f2 <= f1 + 1e-9);
                prop_assert!(f1 <= cap + 1e-9);
            }

            #[test]
            fn aero_is_quadratic(v in 0.0f64..40.0, g in -0.2f64..0.2) {
                let p = params();
                let r1 = resistance_forces(&p, v, g);
                let r2 = resistance_forces(&p, 2.0 * v, g);
                prop_assert!((r2.aero - 4.0 * r1.aero).abs() <= 1e-9 * r1.aero.abs().max(1.0));
            }

            #[test]
            fn clamp_stays_in_envelope(
                a in -12.0f64..12.0,
                b_kin in 0.0f64..6.0,
                v in 0.0f64..40.0,
            ) {
                let p = params();
                let env = accel_envelope(&p, v, 0.0, b_kin).unwrap();
                let c = clamp_accel(a, &env);
                prop_assert!(c.accel >= env.a_min - 1e-12);
                prop_assert!(c.accel <= env.a_max.max(0.0) + 1e-12);
                if a <= 0.0 && env.a_collision >= env.a_min {
                    prop_assert!(c.accel <= env.a_collision + 1e-12);
                }
            }

            #[test]
            fn kinematic_matches_closed_form(
                v_n in 0.0f64..40.0,
                v_l in 0.0f64..40.0,
                gap in 0.5f64..200.0,
            ) {
                let s_j = 5.0;
                let b = kinematic_decel(0.0, v_n, gap + s_j, v_l, s_j).unwrap();
                if v_n > v_l {
                    let closed = (v_n * v_n - v_l * v_l) / (2.0 * gap);
                    prop_assert!((b - closed).abs() <= 1e-12 * closed.abs().max(1.0));
                } else {
                    prop_assert_eq!(b, 0.0);
                }
                // a_collision = 0 exactly when b_kin = 0.
                let p = params();
                let env = accel_envelope(&p, v_n, 0.0, b).unwrap();
                prop_assert_eq!(env.a_collision == 0.0, b == 0.0);
            }
        }
    }
}
