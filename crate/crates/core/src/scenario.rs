//! Scenario files: one canonical TOML document with `corridor`, `vehicle`,
//! `controller`, `demand` and `sim` sections.
//!
//! Parsing always goes through [`parse_scenario`], which applies every
//! default and re-checks every invariant, so a parsed config is fully
//! resolved: serializing it echoes all effective values and re-parsing the
//! echo yields an equivalent config. Validation failures never produce a
//! partial config.

use serde::{Deserialize, Serialize};

use crate::car_following::LinkFundamental;
use crate::dynamics::VehicleParams;
use crate::error::ConfigError;
use crate::platooning::ControllerParams;

/// Platooning lane/cap presets.
///
/// * `A` — platooning on all lanes, unlimited platoon size, platoons persist
///   across links.
/// * `B` — all lanes, size cap 22, per-link (disconnected) platooning.
/// * `C` — leftmost lane only, unlimited, persistent.
/// * `D` — leftmost lane only, cap 22, per-link.
/// * `E` — two leftmost lanes, cap 22, per-link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    A,
    B,
    C,
    D,
    E,
}

impl Preset {
    fn platooning_lanes(self, lanes: u32) -> Vec<u32> {
        match self {
            Preset::A | Preset::B => (0..lanes).collect(),
            Preset::C | Preset::D => vec![0],
            Preset::E => (0..lanes.min(2)).collect(),
        }
    }

    /// Size cap in file encoding: 0 means unlimited.
    fn size_cap(self) -> u32 {
        match self {
            Preset::A | Preset::C => 0,
            Preset::B | Preset::D | Preset::E => 22,
        }
    }

    fn disconnected_links(self) -> bool {
        matches!(self, Preset::B | Preset::D | Preset::E)
    }
}

/// `[corridor]`: lane count and the ordered links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorridorConfig {
    /// Number of lanes, constant along the corridor (lane 0 is leftmost).
    pub lanes: u32,
    /// Links in travel order.
    pub links: Vec<LinkFundamental>,
}

impl Default for CorridorConfig {
    fn default() -> Self {
        CorridorConfig {
            lanes: 2,
            links: vec![LinkFundamental::default(); 4],
        }
    }
}

impl CorridorConfig {
    /// Total corridor length, m.
    pub fn length_m(&self) -> f64 {
        self.links.iter().map(|l| l.length_m).sum()
    }
}

/// `[controller]`: gap policy and platoon lifecycle parameters.
///
/// `jam_spacing_m` defaults to `1000 / k_j` of the first link.
/// `max_platoon_size` defaults from the preset; `0` means unlimited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub desired_time_gap_s: f64,
    pub gain_per_s: f64,
    pub jam_spacing_m: Option<f64>,
    pub boost_factor: f64,
    pub join_window_s: f64,
    pub max_platoon_size: Option<u32>,
    pub join_epsilon_m: f64,
    pub detection_range_m: f64,
    pub follower_drag_factor: f64,
    pub inverted_gain_sign: bool,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let d = ControllerParams::default();
        ControllerConfig {
            desired_time_gap_s: d.desired_time_gap_s,
            gain_per_s: d.gain_per_s,
            jam_spacing_m: None,
            boost_factor: d.boost_factor,
            join_window_s: d.join_window_s,
            max_platoon_size: None,
            join_epsilon_m: d.join_epsilon_m,
            detection_range_m: d.detection_range_m,
            follower_drag_factor: d.follower_drag_factor,
            inverted_gain_sign: d.inverted_gain_sign,
        }
    }
}

/// `[demand]`: arrivals and fleet composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    /// Poisson arrival rate per lane, veh/h.
    pub per_lane_vph: f64,
    /// Market penetration rate: probability an arrival is CACC-equipped,
    /// in [0, 1].
    pub mpr: f64,
    /// Probability a CACC arrival drawn on a non-platooning lane is
    /// reassigned to a platooning lane, in [0, 1].
    pub cacc_lane_preference: f64,
}

impl Default for DemandConfig {
    fn default() -> Self {
        DemandConfig {
            per_lane_vph: 1800.0,
            mpr: 0.0,
            cacc_lane_preference: 0.75,
        }
    }
}

/// `[sim]`: run length, step, seeding and platooning topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub duration_s: f64,
    /// Time step, s, in (0, 1].
    pub dt_s: f64,
    pub seed: u64,
    /// Platooning preset; omit for custom `platooning_lanes` /
    /// `disconnected_links` / `max_platoon_size`.
    pub preset: Option<Preset>,
    /// Lanes on which platooning is active. Filled from the preset.
    pub platooning_lanes: Option<Vec<u32>>,
    /// Whether platoons are confined to single links. Filled from the preset.
    pub disconnected_links: Option<bool>,
    /// Record per-step trajectory rows (disable for large sweeps).
    pub record_trajectories: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            duration_s: 600.0,
            dt_s: 0.1,
            seed: 1,
            preset: Some(Preset::E),
            platooning_lanes: None,
            disconnected_links: None,
            record_trajectories: true,
        }
    }
}

/// A complete scenario. Construct through [`parse_scenario`] or
/// [`ScenarioConfig::resolve`]; the engine assumes a resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub corridor: CorridorConfig,
    pub vehicle: VehicleParams,
    pub controller: ControllerConfig,
    pub demand: DemandConfig,
    pub sim: SimConfig,
}

impl ScenarioConfig {
    /// Apply preset expansion and cross-field defaults, then validate.
    /// Returns non-fatal warnings. Idempotent: resolving an already
    /// resolved config is a no-op (mismatches against the preset error).
    pub fn resolve(&mut self) -> Result<Vec<String>, ConfigError> {
        let lanes = self.corridor.lanes;
        if lanes == 0 {
            return Err(ConfigError::invalid("corridor.lanes", "must be >= 1"));
        }
        if self.corridor.links.is_empty() {
            return Err(ConfigError::invalid(
                "corridor.links",
                "at least one link is required",
            ));
        }

        if let Some(preset) = self.sim.preset {
            let lanes_expected = preset.platooning_lanes(lanes);
            match &self.sim.platooning_lanes {
                None => self.sim.platooning_lanes = Some(lanes_expected),
                Some(given) if *given == lanes_expected => {}
                Some(_) => {
                    return Err(ConfigError::invalid(
                        "sim.platooning_lanes",
                        format!("conflicts with preset {preset:?}; omit it or drop the preset"),
                    ));
                }
            }
            match self.sim.disconnected_links {
                None => self.sim.disconnected_links = Some(preset.disconnected_links()),
                Some(given) if given == preset.disconnected_links() => {}
                Some(_) => {
                    return Err(ConfigError::invalid(
                        "sim.disconnected_links",
                        format!("conflicts with preset {preset:?}; omit it or drop the preset"),
                    ));
                }
            }
            match self.controller.max_platoon_size {
                None => self.controller.max_platoon_size = Some(preset.size_cap()),
                Some(given) if given == preset.size_cap() => {}
                Some(_) => {
                    return Err(ConfigError::invalid(
                        "controller.max_platoon_size",
                        format!("conflicts with preset {preset:?}; omit it or drop the preset"),
                    ));
                }
            }
        } else {
            if self.sim.platooning_lanes.is_none() {
                self.sim.platooning_lanes = Some((0..lanes.min(2)).collect());
            }
            if self.sim.disconnected_links.is_none() {
                self.sim.disconnected_links = Some(true);
            }
            if self.controller.max_platoon_size.is_none() {
                self.controller.max_platoon_size = Some(22);
            }
        }

        if self.controller.jam_spacing_m.is_none() {
            self.controller.jam_spacing_m = Some(self.corridor.links[0].jam_spacing_m());
        }

        self.validate()
    }

    fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let mut warnings = Vec::new();

        for (i, link) in self.corridor.links.iter().enumerate() {
            link.validate(&format!("corridor.links[{i}]"))?;
        }
        self.vehicle.validate()?;
        self.controller_params().validate()?;

        if !(self.demand.per_lane_vph >= 0.0) {
            return Err(ConfigError::invalid(
                "demand.per_lane_vph",
                "must be >= 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.demand.mpr) {
            return Err(ConfigError::invalid("demand.mpr", "must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.demand.cacc_lane_preference) {
            return Err(ConfigError::invalid(
                "demand.cacc_lane_preference",
                "must be in [0, 1]",
            ));
        }
        let q_min = self
            .corridor
            .links
            .iter()
            .map(|l| l.saturation_flow_vphpl)
            .fold(f64::INFINITY, f64::min);
        if self.demand.per_lane_vph > q_min {
            warnings.push(format!(
                "demand.per_lane_vph = {} exceeds the lowest link capacity {} veh/h/lane; \
                 expect entry queuing",
                self.demand.per_lane_vph, q_min
            ));
        }

        if !(self.sim.duration_s >= 0.0) {
            return Err(ConfigError::invalid("sim.duration_s", "must be >= 0"));
        }
        if !(self.sim.dt_s > 0.0 && self.sim.dt_s <= 1.0) {
            return Err(ConfigError::invalid("sim.dt_s", "must be in (0, 1]"));
        }
        let lanes = self.corridor.lanes;
        let platooning = self
            .sim
            .platooning_lanes
            .as_ref()
            .expect("resolved before validate");
        if platooning.iter().any(|&l| l >= lanes) {
            return Err(ConfigError::invalid(
                "sim.platooning_lanes",
                format!("lane index out of range (corridor has {lanes} lanes)"),
            ));
        }

        Ok(warnings)
    }

    /// Resolved controller parameters for the platooning layer.
    ///
    /// Panics if called before [`ScenarioConfig::resolve`].
    pub fn controller_params(&self) -> ControllerParams {
        let c = &self.controller;
        ControllerParams {
            desired_time_gap_s: c.desired_time_gap_s,
            gain_per_s: c.gain_per_s,
            jam_spacing_m: c.jam_spacing_m.expect("config is resolved"),
            boost_factor: c.boost_factor,
            join_window_s: c.join_window_s,
            max_platoon_size: match c.max_platoon_size.expect("config is resolved") {
                0 => None,
                n => Some(n),
            },
            join_epsilon_m: c.join_epsilon_m,
            detection_range_m: c.detection_range_m,
            follower_drag_factor: c.follower_drag_factor,
            inverted_gain_sign: c.inverted_gain_sign,
        }
    }

    /// Lanes with platooning enabled. Panics before resolution.
    pub fn platooning_lanes(&self) -> &[u32] {
        self.sim
            .platooning_lanes
            .as_deref()
            .expect("config is resolved")
    }

    /// Whether platoons are confined to single links. Panics before
    /// resolution.
    pub fn disconnected_links(&self) -> bool {
        self.sim.disconnected_links.expect("config is resolved")
    }

    /// Clone with market penetration rate and seed replaced (sweep points).
    pub fn with_mpr_and_seed(&self, mpr: f64, seed: u64) -> ScenarioConfig {
        let mut c = self.clone();
        c.demand.mpr = mpr;
        c.sim.seed = seed;
        c
    }

    /// Serialize the resolved config as a TOML document.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Parse and fully resolve a scenario document. Field errors name the
/// offending field; TOML syntax errors carry line/column positions.
pub fn parse_scenario(text: &str) -> Result<(ScenarioConfig, Vec<String>), ConfigError> {
    let mut config: ScenarioConfig = toml::from_str(text)?;
    let warnings = config.resolve()?;
    Ok((config, warnings))
}

/// Read, parse and resolve a scenario file.
pub fn load_scenario(
    path: &std::path::Path,
) -> Result<(ScenarioConfig, Vec<String>), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text)
}

/// A seeded market-penetration-rate sweep over a base scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ScenarioConfig,
    /// MPR points in percent, each in [0, 100]. Must include 0 (the
    /// baseline row reductions are computed against).
    pub mpr_percents: Vec<f64>,
    /// Runs per MPR point, seeded `base.sim.seed .. base.sim.seed + seeds`.
    pub seeds: u32,
}

impl SweepSpec {
    /// The default MPR grid.
    pub fn default_mpr_percents() -> Vec<f64> {
        vec![
            0.0, 1.0, 5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0,
        ]
    }

    pub fn new(base: ScenarioConfig) -> Self {
        SweepSpec {
            base,
            mpr_percents: Self::default_mpr_percents(),
            seeds: 6,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds == 0 {
            return Err(ConfigError::invalid("sweep.seeds", "must be >= 1"));
        }
        if self.mpr_percents.is_empty() {
            return Err(ConfigError::invalid(
                "sweep.mpr_percents",
                "at least one MPR point is required",
            ));
        }
        if self
            .mpr_percents
            .iter()
            .any(|&m| !(0.0..=100.0).contains(&m))
        {
            return Err(ConfigError::invalid(
                "sweep.mpr_percents",
                "every MPR must be in [0, 100]",
            ));
        }
        if !self.mpr_percents.contains(&0.0) {
            return Err(ConfigError::invalid(
                "sweep.mpr_percents",
                "must include 0 (the baseline row)",
            ));
        }
        Ok(())
    }
}
