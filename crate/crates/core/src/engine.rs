//! Fixed-step simulation loop.
//!
//! Each step, per lane and front to rear: a candidate acceleration (gap
//! controller for CACC-engaged vehicles, free driving toward the target
//! speed otherwise), then the speed governor caps the candidate speed, then
//! the implied acceleration is clamped into the feasibility envelope, then
//! trapezoidal position integration. Followers read their lead's pre-update
//! state projected one step, so update order within the lane does not leak
//! next-step information.
//!
//! CACC-engaged vehicles (platoon followers and active joiners) are exempt
//! from the steady-state branch of the speed governor — the gap controller
//! replaces it — but keep the acceleration-limit and collision-avoidance
//! branches. Everything else gets the full three-branch governor. A run is
//! strictly single-threaded and fully determined by `(config, seed)`.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::car_following::{
    collision_avoidance_speed, project_spacing, rpa_speed, van_aerde_constants, LeadState,
    LinkFundamental, VanAerdeConstants,
};
use crate::dynamics::{accel_envelope, aero_force, clamp_accel, kinematic_decel};
use crate::error::SimError;
use crate::metrics::{
    aggregate, delay_increment, effective_force, fuel_rate_lps, instantaneous_power_kw,
    FleetSummary, MetricsRecord, VehicleClass,
};
use crate::platooning::{
    cacc_accel, join_target_speed, platoon_scan, ControllerParams, JoinAttempt, PlatoonEvent,
    PlatoonId, PlatoonRegistry, ScanContext, ScanVehicle, VehicleId,
};
use crate::scenario::ScenarioConfig;

/// Kinematic and bookkeeping state of one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    pub class: VehicleClass,
    pub lane: u32,
    /// Front-bumper position along the corridor, m.
    pub x: f64,
    /// Speed, m/s, never negative.
    pub v: f64,
    /// Acceleration applied over the last step, m/s^2.
    pub a: f64,
    pub platoon: Option<PlatoonId>,
    pub attempt: Option<JoinAttempt>,
    pub entry_step: u64,
    /// Test/stress hook: drive toward this speed instead of the limit.
    pub target_override: Option<f64>,
    // Per-trip accumulators.
    pub delay_s: f64,
    pub fuel_l: f64,
    pub distance_m: f64,
    pub time_in_platoon_s: f64,
}

/// A platoon lifecycle event with its time and lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub t_s: f64,
    pub lane: u32,
    pub event: PlatoonEvent,
}

/// One trajectory sample (written once per vehicle per step).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t_s: f64,
    pub vehicle: VehicleId,
    pub class: VehicleClass,
    pub lane: u32,
    pub x_m: f64,
    pub v_mps: f64,
    pub a_mps2: f64,
    pub platoon: Option<PlatoonId>,
    pub fuel_rate_lps: f64,
    /// Cumulative delay, s.
    pub delay_s: f64,
}

/// Run-level counters and extrema, updated every step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldStats {
    pub spawned: u64,
    pub completed: u64,
    /// Steps on which an arrival stayed queued because entry would breach
    /// jam spacing.
    pub spawn_deferrals: u64,
    /// Infeasible clamp events (`a_collision < a_min`).
    pub infeasible_clamps: u64,
    /// Steps where the feasible upper bound `a_max` was non-positive.
    pub negative_a_max_steps: u64,
    /// Applied accelerations outside `[a_min, a_max]` (must stay 0).
    pub envelope_violations: u64,
    /// Negative-and-closing accelerations weaker than the collision bound
    /// (must stay 0).
    pub collision_bound_violations: u64,
    /// Speeds outside `[0, boost * v_f]` (must stay 0).
    pub speed_violations: u64,
    /// Minimum front-to-front spacing observed between lane-adjacent pairs.
    pub min_spacing_m: f64,
}

impl Default for WorldStats {
    fn default() -> Self {
        WorldStats {
            spawned: 0,
            completed: 0,
            spawn_deferrals: 0,
            infeasible_clamps: 0,
            negative_a_max_steps: 0,
            envelope_violations: 0,
            collision_bound_violations: 0,
            speed_violations: 0,
            min_spacing_m: f64::INFINITY,
        }
    }
}

/// Everything a completed run produces.
#[derive(Debug, Clone)]
pub struct RunResult {
    /// The fully resolved configuration the run used.
    pub config: ScenarioConfig,
    pub warnings: Vec<String>,
    /// Fleet/per-class means; `None` when no trip completed.
    pub summary: Option<FleetSummary>,
    pub records: Vec<MetricsRecord>,
    pub events: Vec<TimedEvent>,
    /// Empty unless `sim.record_trajectories` was set.
    pub trajectories: Vec<TrajectoryRow>,
    pub stats: WorldStats,
}

/// The mutable simulation world. Single-writer; exclusively owned by a run.
pub struct World {
    config: ScenarioConfig,
    ctrl: ControllerParams,
    links: Vec<LinkFundamental>,
    consts: Vec<VanAerdeConstants>,
    /// Cumulative start position of each link, m.
    link_starts: Vec<f64>,
    corridor_len: f64,
    platooning_lanes: Vec<u32>,
    disconnected_links: bool,
    /// Per lane, front (largest x) first.
    lanes: Vec<VecDeque<VehicleState>>,
    registry: PlatoonRegistry,
    rng: ChaCha8Rng,
    arrivals: Option<Poisson<f64>>,
    spawn_queues: Vec<VecDeque<VehicleClass>>,
    clock_step: u64,
    dt: f64,
    next_vehicle_id: u64,
    completed: Vec<MetricsRecord>,
    events: Vec<TimedEvent>,
    trajectories: Option<Vec<TrajectoryRow>>,
    stats: WorldStats,
}

impl World {
    /// Build an empty world from a scenario. The config is re-resolved, so
    /// both raw and resolved configs are accepted.
    pub fn new(config: &ScenarioConfig) -> Result<World, SimError> {
        let mut config = config.clone();
        config.resolve()?;
        let ctrl = config.controller_params();
        let links = config.corridor.links.clone();
        let consts = links
            .iter()
            .map(van_aerde_constants)
            .collect::<Result<Vec<_>, _>>()?;
        let mut link_starts = Vec::with_capacity(links.len());
        let mut x = 0.0;
        for link in &links {
            link_starts.push(x);
            x += link.length_m;
        }
        let lanes = config.corridor.lanes as usize;
        let lambda = config.demand.per_lane_vph / 3600.0 * config.sim.dt_s;
        let arrivals = if lambda > 0.0 {
            Some(Poisson::new(lambda).expect("positive arrival rate"))
        } else {
            None
        };
        Ok(World {
            ctrl,
            consts,
            link_starts,
            corridor_len: x,
            platooning_lanes: config.platooning_lanes().to_vec(),
            disconnected_links: config.disconnected_links(),
            lanes: vec![VecDeque::new(); lanes],
            registry: PlatoonRegistry::new(),
            rng: ChaCha8Rng::seed_from_u64(config.sim.seed),
            arrivals,
            spawn_queues: vec![VecDeque::new(); lanes],
            clock_step: 0,
            dt: config.sim.dt_s,
            next_vehicle_id: 0,
            completed: Vec::new(),
            events: Vec::new(),
            trajectories: config.sim.record_trajectories.then(Vec::new),
            stats: WorldStats::default(),
            links,
            config,
        })
    }

    /// Current simulated time, s.
    pub fn clock_s(&self) -> f64 {
        self.clock_step as f64 * self.dt
    }

    pub fn clock_step(&self) -> u64 {
        self.clock_step
    }

    pub fn stats(&self) -> &WorldStats {
        &self.stats
    }

    pub fn events(&self) -> &[TimedEvent] {
        &self.events
    }

    pub fn registry(&self) -> &PlatoonRegistry {
        &self.registry
    }

    pub fn completed_records(&self) -> &[MetricsRecord] {
        &self.completed
    }

    /// Vehicles in one lane, front (largest x) first.
    pub fn lane(&self, lane: u32) -> impl Iterator<Item = &VehicleState> {
        self.lanes[lane as usize].iter()
    }

    pub fn lane_count(&self) -> u32 {
        self.lanes.len() as u32
    }

    pub fn corridor_length_m(&self) -> f64 {
        self.corridor_len
    }

    pub fn vehicle(&self, id: VehicleId) -> Option<&VehicleState> {
        self.lanes.iter().flatten().find(|v| v.id == id)
    }

    /// Index of the link containing position `x` (clamped to the last link
    /// for positions at or beyond the corridor end).
    pub fn link_index(&self, x: f64) -> usize {
        link_index_of(&self.link_starts, x)
    }

    /// Insert a vehicle explicitly (scenario setup and tests). Keeps the
    /// lane ordered by position; rejects overlap.
    pub fn insert_vehicle(
        &mut self,
        lane: u32,
        class: VehicleClass,
        x: f64,
        v: f64,
    ) -> Result<VehicleId, SimError> {
        let id = VehicleId(self.next_vehicle_id);
        self.next_vehicle_id += 1;
        let vehicle = VehicleState {
            id,
            class,
            lane,
            x,
            v,
            a: 0.0,
            platoon: None,
            attempt: None,
            entry_step: self.clock_step,
            target_override: None,
            delay_s: 0.0,
            fuel_l: 0.0,
            distance_m: 0.0,
            time_in_platoon_s: 0.0,
        };
        let deque = &mut self.lanes[lane as usize];
        let pos = deque.partition_point(|other| other.x > x);
        if pos < deque.len() && deque[pos].x == x {
            return Err(SimError::Internal(format!(
                "two vehicles share position x = {x}"
            )));
        }
        deque.insert(pos, vehicle);
        self.stats.spawned += 1;
        Ok(id)
    }

    /// Register an already-spaced string of vehicles as a platoon (scenario
    /// setup and tests). `members` must be lane-contiguous, front first.
    pub fn form_platoon(&mut self, members: &[VehicleId]) -> Result<PlatoonId, SimError> {
        let leader = *members
            .first()
            .ok_or_else(|| SimError::Internal("empty platoon".into()))?;
        let (lane, link, positions): (u32, usize, Vec<f64>) = {
            let v = self
                .vehicle(leader)
                .ok_or_else(|| SimError::Internal("unknown leader".into()))?;
            let lane = v.lane;
            let xs = members
                .iter()
                .map(|&m| {
                    self.vehicle(m)
                        .filter(|s| s.lane == lane)
                        .map(|s| s.x)
                        .ok_or_else(|| SimError::Internal("member not in leader's lane".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (lane, self.link_index(v.x), xs)
        };
        if positions.windows(2).any(|w| w[0] <= w[1]) {
            return Err(SimError::Internal(
                "platoon members must be ordered front to rear".into(),
            ));
        }
        let id = PlatoonId(self.registry.peek_next_id());
        let now = self.clock_s();
        self.registry.create(id, leader, lane, link, now);
        self.set_platoon(leader, Some(id));
        for &m in &members[1..] {
            self.registry.append_member(id, m);
            self.set_platoon(m, Some(id));
        }
        Ok(id)
    }

    /// Test/stress hook: drive a vehicle toward `target` m/s instead of the
    /// speed limit (`None` restores normal behavior).
    pub fn set_target_override(&mut self, id: VehicleId, target: Option<f64>) {
        if let Some(v) = self.vehicle_mut(id) {
            v.target_override = target;
        }
    }

    fn vehicle_mut(&mut self, id: VehicleId) -> Option<&mut VehicleState> {
        self.lanes.iter_mut().flatten().find(|v| v.id == id)
    }

    fn set_platoon(&mut self, id: VehicleId, platoon: Option<PlatoonId>) {
        if let Some(v) = self.vehicle_mut(id) {
            v.platoon = platoon;
            if platoon.is_some() {
                v.attempt = None;
            }
        }
    }

    /// Advance the world by one step: spawn, move, retire, platoon scan.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.spawn();
        self.move_vehicles()?;
        self.clock_step += 1;
        self.retire();
        self.scan_platoons();
        self.check_ordering()?;
        Ok(())
    }

    /// Poisson arrivals per lane; CACC arrivals prefer platooning lanes.
    /// Arrivals enter at the governor-safe entry speed and wait in a queue
    /// while entry would breach jam spacing.
    fn spawn(&mut self) {
        if let Some(arrivals) = self.arrivals {
            let mpr = self.config.demand.mpr;
            let preference = self.config.demand.cacc_lane_preference;
            for lane in 0..self.lanes.len() {
                let n = arrivals.sample(&mut self.rng) as u64;
                for _ in 0..n {
                    let class = if self.rng.gen::<f64>() < mpr {
                        VehicleClass::Cacc
                    } else {
                        VehicleClass::NonCacc
                    };
                    let mut dest = lane as u32;
                    if class == VehicleClass::Cacc
                        && !self.platooning_lanes.is_empty()
                        && !self.platooning_lanes.contains(&dest)
                        && self.rng.gen::<f64>() < preference
                    {
                        let pick = self.rng.gen_range(0..self.platooning_lanes.len());
                        dest = self.platooning_lanes[pick];
                    }
                    self.spawn_queues[dest as usize].push_back(class);
                }
            }
        }
        // Entry is gated on capacity spacing (v_c / q_c), not bare jam
        // spacing: a fully saturated entry then discharges at the
        // saturation flow instead of feeding crawling vehicles into the
        // lane, and a queue spilling back over the entry blocks it.
        let entry_spacing =
            (1000.0 * self.links[0].capacity_speed_kmh / self.links[0].saturation_flow_vphpl)
                .max(self.links[0].jam_spacing_m());
        for lane in 0..self.lanes.len() {
            if self.spawn_queues[lane].is_empty() {
                continue;
            }
            let clear = match self.lanes[lane].back() {
                None => true,
                Some(last) => last.x >= entry_spacing,
            };
            if !clear {
                self.stats.spawn_deferrals += 1;
                continue;
            }
            let class = self.spawn_queues[lane].pop_front().expect("non-empty");
            let v_entry = self.entry_speed(lane);
            self.insert_vehicle(lane as u32, class, 0.0, v_entry)
                .expect("entry position is clear");
        }
    }

    /// Entry speed that respects the governor against the rearmost vehicle.
    fn entry_speed(&self, lane: usize) -> f64 {
        let fund = &self.links[0];
        let v_f = fund.free_flow_mps();
        match self.lanes[lane].back() {
            None => v_f,
            Some(last) => {
                let spacing = last.x;
                let steady = crate::car_following::steady_state_speed(
                    &self.consts[0],
                    fund,
                    spacing / 1000.0,
                )
                .map(crate::kmh_to_mps)
                .unwrap_or(0.0);
                let avoid = collision_avoidance_speed(
                    last.v,
                    spacing,
                    fund.jam_spacing_m(),
                    self.config.vehicle.desired_decel_mps2,
                );
                v_f.min(steady).min(avoid)
            }
        }
    }

    fn move_vehicles(&mut self) -> Result<(), SimError> {
        let t_next = (self.clock_step + 1) as f64 * self.dt;
        let dt = self.dt;
        let p = self.config.vehicle.clone();
        let ctrl = self.ctrl.clone();
        let boost = ctrl.boost_factor;
        // Global speed sanity bound: a vehicle entering a slower link needs
        // time to shed speed, so the counter uses the corridor-wide limit.
        let v_bound = boost
            * self
                .links
                .iter()
                .map(LinkFundamental::free_flow_mps)
                .fold(0.0, f64::max);

        for lane in self.lanes.iter_mut() {
            let mut lead: Option<LeadState> = None;
            for veh in lane.iter_mut() {
                let snapshot = LeadState {
                    x: veh.x,
                    v: veh.v,
                    a: veh.a,
                };
                let link_idx = link_index_of(&self.link_starts, veh.x);
                let fund = &self.links[link_idx];
                let consts = &self.consts[link_idx];
                let grade = fund.grade;
                let v_limit = fund.free_flow_mps();
                let jam = fund.jam_spacing_m();

                let b_kin = match &lead {
                    Some(l) => kinematic_decel(veh.x, veh.v, l.x, l.v, jam).map_err(|e| {
                        SimError::Internal(format!(
                            "vehicle {} overlaps its lead at t = {t_next}: {e}",
                            veh.id
                        ))
                    })?,
                    None => 0.0,
                };
                let env = accel_envelope(&p, veh.v, grade, b_kin)?;
                if env.a_max <= 0.0 {
                    self.stats.negative_a_max_steps += 1;
                }

                let is_follower = veh
                    .platoon
                    .map(|pid| {
                        self.registry
                            .get(pid)
                            .map(|pl| pl.leader() != veh.id)
                            .unwrap_or(false)
                    })
                    .unwrap_or(false);
                let is_joiner = veh.attempt.is_some();
                let cacc_engaged = (is_follower || is_joiner) && lead.is_some();

                // (1) candidate speed
                let v_cand = if cacc_engaged {
                    let l = lead.as_ref().expect("cacc_engaged implies a lead");
                    let a_cand = cacc_accel(veh.x, veh.v, l.x, l.v, &ctrl);
                    // Joiners get the boosted ceiling; followers share it so
                    // they can close residual gaps above the limit.
                    let ceiling = if is_joiner {
                        join_target_speed(v_limit, true, &ctrl)
                    } else {
                        boost * v_limit
                    };
                    (veh.v + a_cand * dt).min(ceiling)
                } else {
                    let target = veh.target_override.unwrap_or(v_limit);
                    veh.v + ((target - veh.v) / dt) * dt
                };

                // (2) safety speed
                let v_safe = if cacc_engaged {
                    let l = lead.as_ref().expect("cacc_engaged implies a lead");
                    let s_next = project_spacing(l.x - veh.x, veh.v, l.v, l.a, dt);
                    let avoid = collision_avoidance_speed(
                        l.projected_speed(dt),
                        s_next,
                        jam,
                        p.desired_decel_mps2,
                    );
                    (veh.v + env.a_max * dt).min(avoid)
                } else {
                    rpa_speed(
                        veh.v,
                        lead.as_ref(),
                        veh.x,
                        fund,
                        consts,
                        env.a_max,
                        p.desired_decel_mps2,
                        dt,
                    )?
                };

                // (3) combine and floor
                let mut v_next = v_cand.min(v_safe).max(0.0);

                // (4) clamp the implied acceleration into the envelope
                let a_impl = (v_next - veh.v) / dt;
                let clamped = clamp_accel(a_impl, &env);
                if clamped.infeasible {
                    self.stats.infeasible_clamps += 1;
                }
                let mut a_final = clamped.accel;
                v_next = (veh.v + a_final * dt).max(0.0);
                a_final = (v_next - veh.v) / dt;

                // (5) trapezoidal position update
                let x_next = veh.x + 0.5 * (veh.v + v_next) * dt;

                // Compliance counters (must stay zero).
                if a_final > env.a_max + 1e-9 || a_final < env.a_min - 1e-9 {
                    self.stats.envelope_violations += 1;
                }
                if !clamped.infeasible && v_next > 0.0 && a_final < -1e-12 {
                    if let Some(l) = &lead {
                        if veh.v > l.v && a_final > env.a_collision + 1e-9 {
                            self.stats.collision_bound_violations += 1;
                        }
                    }
                }
                if v_next < -1e-12 || v_next > v_bound + 1e-9 {
                    self.stats.speed_violations += 1;
                }

                // (7) metrics
                veh.delay_s += delay_increment(v_next, v_limit, dt);
                let drag_factor = if is_follower {
                    ctrl.follower_drag_factor
                } else {
                    1.0
                };
                let mut f_e = effective_force(&p, v_next, a_final, grade);
                if drag_factor != 1.0 {
                    f_e -= (1.0 - drag_factor) * aero_force(&p, v_next);
                }
                let fuel_rate = fuel_rate_lps(&p, instantaneous_power_kw(f_e, v_next), v_next);
                veh.fuel_l += fuel_rate * dt;
                veh.distance_m += 0.5 * (veh.v + v_next) * dt;
                if veh.platoon.is_some() {
                    veh.time_in_platoon_s += dt;
                }

                veh.x = x_next;
                veh.v = v_next;
                veh.a = a_final;

                if let Some(rows) = &mut self.trajectories {
                    rows.push(TrajectoryRow {
                        t_s: t_next,
                        vehicle: veh.id,
                        class: veh.class,
                        lane: veh.lane,
                        x_m: veh.x,
                        v_mps: veh.v,
                        a_mps2: veh.a,
                        platoon: veh.platoon,
                        fuel_rate_lps: fuel_rate,
                        delay_s: veh.delay_s,
                    });
                }

                lead = Some(snapshot);
            }
        }
        Ok(())
    }

    /// Retire vehicles that reached the corridor end and close their
    /// metrics records. An exiting platoon member is necessarily its
    /// platoon's leader; trailing members continue under a promoted leader.
    fn retire(&mut self) {
        let now = self.clock_s();
        let now_step = self.clock_step;
        let corridor_len = self.corridor_len;
        for lane_idx in 0..self.lanes.len() {
            while let Some(front) = self.lanes[lane_idx].front() {
                if front.x < corridor_len {
                    break;
                }
                let veh = self.lanes[lane_idx].pop_front().expect("non-empty");
                if let Some(pid) = veh.platoon {
                    debug_assert_eq!(
                        self.registry.get(pid).map(|p| p.leader()),
                        Some(veh.id),
                        "an exiting member must be its platoon's leader"
                    );
                    let remaining = self.registry.remove_leader(pid);
                    self.events.push(TimedEvent {
                        t_s: now,
                        lane: veh.lane,
                        event: PlatoonEvent::SplitExit {
                            vehicle: veh.id,
                            platoon: pid,
                            remaining,
                        },
                    });
                }
                self.stats.completed += 1;
                self.completed.push(MetricsRecord {
                    vehicle: veh.id,
                    class: veh.class,
                    travel_time_s: (now_step - veh.entry_step) as f64 * self.dt,
                    delay_s: veh.delay_s,
                    fuel_l: veh.fuel_l,
                    distance_m: veh.distance_m,
                    time_in_platoon_s: veh.time_in_platoon_s,
                    entry_s: veh.entry_step as f64 * self.dt,
                    exit_s: now,
                });
            }
        }
    }

    /// Run the lifecycle scan lane by lane and apply its outcome.
    fn scan_platoons(&mut self) {
        let now = self.clock_s();
        let now_step = self.clock_step;
        for lane_idx in 0..self.lanes.len() {
            let lane = lane_idx as u32;
            let views: Vec<ScanVehicle> = self.lanes[lane_idx]
                .iter()
                .map(|v| {
                    let link = link_index_of(&self.link_starts, v.x);
                    ScanVehicle {
                        id: v.id,
                        is_cacc: v.class == VehicleClass::Cacc,
                        x: v.x,
                        v: v.v,
                        v_limit: self.links[link].free_flow_mps(),
                        link,
                        platoon: v.platoon,
                        attempt: v.attempt,
                    }
                })
                .collect();
            let outcome = platoon_scan(
                &views,
                &ScanContext {
                    registry: &self.registry,
                    ctrl: &self.ctrl,
                    lane,
                    lane_platooning: self.platooning_lanes.contains(&lane),
                    disconnected_links: self.disconnected_links,
                    now_step,
                    dt: self.dt,
                },
            );
            if outcome.is_empty() {
                continue;
            }

            let index: HashMap<VehicleId, usize> = self.lanes[lane_idx]
                .iter()
                .enumerate()
                .map(|(i, v)| (v.id, i))
                .collect();
            for (vid, new_target) in outcome.retargets {
                let i = index[&vid];
                if let Some(attempt) = &mut self.lanes[lane_idx][i].attempt {
                    attempt.target = new_target;
                }
            }
            for event in outcome.events {
                match event {
                    PlatoonEvent::Form { vehicle, platoon } => {
                        let i = index[&vehicle];
                        let link = link_index_of(&self.link_starts, self.lanes[lane_idx][i].x);
                        self.registry.create(platoon, vehicle, lane, link, now);
                        self.lanes[lane_idx][i].platoon = Some(platoon);
                        self.lanes[lane_idx][i].attempt = None;
                    }
                    PlatoonEvent::JoinStart { vehicle, platoon } => {
                        let i = index[&vehicle];
                        // A lone platoon leader abandons its own platoon to
                        // join the one ahead.
                        if let Some(old) = self.lanes[lane_idx][i].platoon.take() {
                            if let Some(state) = self.registry.get(old) {
                                debug_assert_eq!(state.len(), 1);
                                self.registry.remove(old);
                            }
                        }
                        self.lanes[lane_idx][i].attempt = Some(JoinAttempt {
                            vehicle,
                            target: platoon,
                            start_step: now_step,
                        });
                    }
                    PlatoonEvent::JoinCommit { vehicle, platoon } => {
                        let i = index[&vehicle];
                        self.registry.append_member(platoon, vehicle);
                        self.lanes[lane_idx][i].platoon = Some(platoon);
                        self.lanes[lane_idx][i].attempt = None;
                    }
                    PlatoonEvent::JoinAbort {
                        vehicle,
                        new_platoon,
                        ..
                    }
                    | PlatoonEvent::SplitCap {
                        vehicle,
                        new_platoon,
                        ..
                    } => {
                        let i = index[&vehicle];
                        let link = link_index_of(&self.link_starts, self.lanes[lane_idx][i].x);
                        self.registry.create(new_platoon, vehicle, lane, link, now);
                        self.lanes[lane_idx][i].platoon = Some(new_platoon);
                        self.lanes[lane_idx][i].attempt = None;
                    }
                    PlatoonEvent::SplitBoundary {
                        platoon,
                        leader,
                        new_platoon,
                        link,
                    } => {
                        let old = self.registry.remove(platoon);
                        for member in &old.members {
                            let i = index[member];
                            self.lanes[lane_idx][i].platoon = None;
                        }
                        self.registry.create(new_platoon, leader, lane, link, now);
                        let i = index[&leader];
                        self.lanes[lane_idx][i].platoon = Some(new_platoon);
                    }
                    PlatoonEvent::SplitExit { .. } => {
                        unreachable!("the scan never emits SplitExit")
                    }
                }
                self.events.push(TimedEvent {
                    t_s: now,
                    lane,
                    event,
                });
            }
        }
    }

    /// Audit platoon bookkeeping: members exist and point back at their
    /// platoon, membership is lane-contiguous, no vehicle is in two
    /// platoons, and sizes respect the cap. Intended for tests and
    /// debugging; returns the first inconsistency found.
    pub fn audit_platoons(&self) -> Result<(), String> {
        use std::collections::HashMap;
        let mut seen: HashMap<VehicleId, PlatoonId> = HashMap::new();
        for platoon in self.registry.iter() {
            if platoon.is_empty() {
                return Err(format!("platoon {} is empty", platoon.id));
            }
            if let Some(cap) = self.ctrl.max_platoon_size {
                if platoon.len() > cap as usize {
                    return Err(format!(
                        "platoon {} has {} members, cap {}",
                        platoon.id,
                        platoon.len(),
                        cap
                    ));
                }
            }
            for &m in &platoon.members {
                if let Some(previous) = seen.insert(m, platoon.id) {
                    return Err(format!(
                        "vehicle {m} in platoons {previous} and {}",
                        platoon.id
                    ));
                }
                match self.vehicle(m) {
                    None => return Err(format!("platoon {} member {m} missing", platoon.id)),
                    Some(v) if v.platoon != Some(platoon.id) => {
                        return Err(format!(
                            "vehicle {m} does not point back at platoon {}",
                            platoon.id
                        ))
                    }
                    Some(v) if v.lane != platoon.lane => {
                        return Err(format!(
                            "vehicle {m} left the lane of platoon {}",
                            platoon.id
                        ))
                    }
                    _ => {}
                }
            }
        }
        // Contiguity: between a platoon's first and last member every
        // vehicle belongs to that platoon.
        for lane in &self.lanes {
            let mut current: Option<(PlatoonId, usize, usize)> = None;
            for v in lane.iter() {
                match (current, v.platoon) {
                    (Some((pid, seen_n, total)), other) if seen_n < total => {
                        if other != Some(pid) {
                            return Err(format!(
                                "vehicle {} interleaves platoon {pid}",
                                v.id
                            ));
                        }
                        current = Some((pid, seen_n + 1, total));
                    }
                    (_, Some(pid)) => {
                        let total = self
                            .registry
                            .get(pid)
                            .map(|p| p.len())
                            .ok_or_else(|| format!("vehicle {} in dead platoon {pid}", v.id))?;
                        if self.registry.get(pid).unwrap().leader() != v.id {
                            return Err(format!(
                                "platoon {pid} encountered mid-string at vehicle {}",
                                v.id
                            ));
                        }
                        current = Some((pid, 1, total));
                    }
                    (_, None) => current = None,
                }
            }
            if let Some((pid, seen_n, total)) = current {
                if seen_n < total {
                    return Err(format!(
                        "platoon {pid} truncated: saw {seen_n} of {total} members"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Verify within-lane ordering and track the minimum spacing.
    fn check_ordering(&mut self) -> Result<(), SimError> {
        for lane in &self.lanes {
            let mut iter = lane.iter();
            if let Some(mut prev) = iter.next() {
                for veh in iter {
                    let spacing = prev.x - veh.x;
                    if spacing <= 0.0 {
                        return Err(SimError::Internal(format!(
                            "lane order violated at t = {}: vehicle {} (x = {}) is not behind {} (x = {})",
                            self.clock_s(),
                            veh.id,
                            veh.x,
                            prev.id,
                            prev.x
                        )));
                    }
                    if spacing < self.stats.min_spacing_m {
                        self.stats.min_spacing_m = spacing;
                    }
                    prev = veh;
                }
            }
        }
        Ok(())
    }

    /// Consume the world into a [`RunResult`].
    pub fn into_result(self, warnings: Vec<String>) -> RunResult {
        let summary = aggregate(&self.completed).ok();
        RunResult {
            config: self.config,
            warnings,
            summary,
            records: self.completed,
            events: self.events,
            trajectories: self.trajectories.unwrap_or_default(),
            stats: self.stats,
        }
    }
}

#[inline]
fn link_index_of(link_starts: &[f64], x: f64) -> usize {
    match link_starts.binary_search_by(|start| start.partial_cmp(&x).expect("finite positions")) {
        Ok(i) => i,
        Err(0) => 0,
        Err(i) => i - 1,
    }
}

/// Execute a scenario start to finish.
pub fn run(config: &ScenarioConfig) -> Result<RunResult, SimError> {
    let mut resolved = config.clone();
    let warnings = resolved.resolve()?;
    let mut world = World::new(&resolved)?;
    let steps = (resolved.sim.duration_s / resolved.sim.dt_s).round() as u64;
    for _ in 0..steps {
        world.step()?;
    }
    Ok(world.into_result(warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::VehicleParams;
    use crate::scenario::parse_scenario;
    use approx::assert_relative_eq;

    fn base_config() -> ScenarioConfig {
        let (config, _) = parse_scenario(
            "[demand]\nper_lane_vph = 0.0\n[sim]\nduration_s = 60.0\npreset = \"E\"\n",
        )
        .unwrap();
        config
    }

    #[test]
    fn empty_world_advances_clock_only() {
        let mut world = World::new(&base_config()).unwrap();
        world.step().unwrap();
        assert_relative_eq!(world.clock_s(), 0.1);
        assert_eq!(world.stats().spawned, 0);
    }

    #[test]
    fn single_vehicle_accelerates_at_envelope_limit() {
        let mut world = World::new(&base_config()).unwrap();
        let id = world
            .insert_vehicle(0, VehicleClass::NonCacc, 100.0, 20.0)
            .unwrap();
        world.step().unwrap();
        let veh = world.vehicle(id).unwrap();
        let env = accel_envelope(&VehicleParams::default(), 20.0, 0.0, 0.0).unwrap();
        assert_relative_eq!(veh.a, env.a_max, max_relative = 1e-12);
        assert_relative_eq!(veh.v, 20.0 + env.a_max * 0.1, max_relative = 1e-12);
        // Trapezoidal position update.
        assert_relative_eq!(
            veh.x,
            100.0 + 0.5 * (20.0 + veh.v) * 0.1,
            max_relative = 1e-12
        );
    }

    #[test]
    fn vehicle_holds_free_flow_speed() {
        let mut world = World::new(&base_config()).unwrap();
        let v_f = 100.0 / 3.6;
        let id = world
            .insert_vehicle(0, VehicleClass::NonCacc, 100.0, v_f)
            .unwrap();
        for _ in 0..100 {
            world.step().unwrap();
        }
        let veh = world.vehicle(id).unwrap();
        assert_relative_eq!(veh.v, v_f, max_relative = 1e-12);
        assert_eq!(veh.delay_s, 0.0);
    }

    #[test]
    fn identical_seeds_give_identical_worlds() {
        let (config, _) = parse_scenario(
            "[demand]\nper_lane_vph = 1500.0\nmpr = 0.5\n[sim]\nduration_s = 120.0\nseed = 9\npreset = \"E\"\n",
        )
        .unwrap();
        let a = run(&config).unwrap();
        let b = run(&config).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.records, b.records);
        assert_eq!(a.trajectories, b.trajectories);
    }

    #[test]
    fn zero_demand_spawns_nothing() {
        let result = run(&base_config()).unwrap();
        assert_eq!(result.stats.spawned, 0);
        assert!(result.summary.is_none());
    }

    #[test]
    fn full_mpr_spawns_only_cacc() {
        let (config, _) = parse_scenario(
            "[demand]\nper_lane_vph = 1800.0\nmpr = 1.0\n[sim]\nduration_s = 120.0\npreset = \"E\"\n",
        )
        .unwrap();
        let mut world = World::new(&config).unwrap();
        for _ in 0..1200 {
            world.step().unwrap();
        }
        assert!(world.stats().spawned > 0);
        for lane in 0..world.lane_count() {
            assert!(world.lane(lane).all(|v| v.class == VehicleClass::Cacc));
        }
    }

    #[test]
    fn poisson_spawn_count_within_four_sigma() {
        // One lane, 1800 veh/h over one hour: 1800 +- 4 * sqrt(1800).
        let (config, _) = parse_scenario(concat!(
            "[corridor]\nlanes = 1\n",
            "[[corridor.links]]\nlength_m = 100000.0\n",
            "[demand]\nper_lane_vph = 1800.0\n",
            "[sim]\nduration_s = 3600.0\nseed = 4\npreset = \"C\"\nrecord_trajectories = false\n",
        ))
        .unwrap();
        let result = run(&config).unwrap();
        let n = result.stats.spawned as f64;
        let sigma = 1800.0_f64.sqrt();
        assert!(
            (n - 1800.0).abs() <= 4.0 * sigma,
            "spawn count {n} outside 1800 +- {}",
            4.0 * sigma
        );
    }

    #[test]
    fn duration_zero_yields_empty_result() {
        let (config, _) =
            parse_scenario("[demand]\nper_lane_vph = 1800.0\n[sim]\nduration_s = 0.0\n").unwrap();
        let result = run(&config).unwrap();
        assert!(result.summary.is_none());
        assert!(result.trajectories.is_empty());
        assert!(result.records.is_empty());
    }

    #[test]
    fn two_vehicle_platoon_converges_to_policy_gap() {
        let (config, _) = parse_scenario(concat!(
            "[corridor]\nlanes = 1\n[[corridor.links]]\nlength_m = 100000.0\n",
            "[demand]\nper_lane_vph = 0.0\n",
            "[sim]\nduration_s = 120.0\npreset = \"C\"\n",
        ))
        .unwrap();
        let mut world = World::new(&config).unwrap();
        let v_f = 100.0 / 3.6;
        let jam = 1000.0 / 180.0;
        let gap0 = jam + 0.6 * v_f + 5.0;
        let lead = world
            .insert_vehicle(0, VehicleClass::Cacc, 500.0, v_f)
            .unwrap();
        let follower = world
            .insert_vehicle(0, VehicleClass::Cacc, 500.0 - gap0, v_f)
            .unwrap();
        world.form_platoon(&[lead, follower]).unwrap();
        for _ in 0..1200 {
            world.step().unwrap();
        }
        let gap = world.vehicle(lead).unwrap().x - world.vehicle(follower).unwrap().x;
        assert_relative_eq!(gap, jam + 0.6 * v_f, epsilon = 0.05);
        assert_eq!(world.stats().infeasible_clamps, 0);
        assert_eq!(world.stats().envelope_violations, 0);
    }

    #[test]
    fn rpa_follower_converges_to_steady_state_spacing() {
        // Closed-loop check of the speed governor: a follower behind a
        // constant-speed lead settles at the equilibrium spacing of the
        // fundamental diagram, within 1%.
        let (config, _) = parse_scenario(concat!(
            "[corridor]\nlanes = 1\n[[corridor.links]]\nlength_m = 100000.0\n",
            "[demand]\nper_lane_vph = 0.0\n",
            "[sim]\nduration_s = 600.0\npreset = \"C\"\n",
        ))
        .unwrap();
        let mut world = World::new(&config).unwrap();
        let v_lead = 60.0 / 3.6;
        let lead = world
            .insert_vehicle(0, VehicleClass::NonCacc, 800.0, v_lead)
            .unwrap();
        let follower = world
            .insert_vehicle(0, VehicleClass::NonCacc, 500.0, v_lead)
            .unwrap();
        world.set_target_override(lead, Some(v_lead));
        for _ in 0..6000 {
            world.step().unwrap();
        }
        let spacing = world.vehicle(lead).unwrap().x - world.vehicle(follower).unwrap().x;
        let fund = LinkFundamental {
            length_m: 100000.0,
            ..LinkFundamental::default()
        };
        let k = crate::car_following::van_aerde_constants(&fund).unwrap();
        let expected =
            1000.0 * crate::car_following::steady_state_spacing(&k, &fund, 60.0).unwrap();
        assert!(
            ((spacing - expected) / expected).abs() <= 0.01,
            "spacing {spacing:.2} m vs steady state {expected:.2} m"
        );
    }

    #[test]
    fn platoon_bookkeeping_stays_consistent_under_load() {
        for preset in ["B", "E"] {
            let (config, _) = parse_scenario(&format!(
                concat!(
                    "[corridor]\nlanes = 2\n",
                    "[[corridor.links]]\n[[corridor.links]]\n[[corridor.links]]\n",
                    "[demand]\nper_lane_vph = 2200.0\nmpr = 0.8\n",
                    "[sim]\nduration_s = 240.0\nseed = 13\npreset = \"{}\"\n",
                    "record_trajectories = false\n",
                ),
                preset
            ))
            .unwrap();
            let mut world = World::new(&config).unwrap();
            for step in 0..2400 {
                world.step().unwrap();
                if step % 10 == 0 {
                    world.audit_platoons().unwrap();
                }
            }
            assert!(world.stats().spawned > 100);
            // Delay can never exceed travel time, and fuel is at least the
            // idle burn, for every completed trip.
            let idle = VehicleParams::default().fuel_alpha[0];
            for r in world.completed_records() {
                assert!(r.delay_s <= r.travel_time_s + 1e-9);
                assert!(r.fuel_l >= idle * r.travel_time_s - 1e-12);
                assert!(r.time_in_platoon_s <= r.travel_time_s + 1e-9);
            }
        }
    }

    #[test]
    fn coarser_time_step_stays_stable() {
        let (config, _) = parse_scenario(concat!(
            "[corridor]\nlanes = 1\n[[corridor.links]]\n[[corridor.links]]\n",
            "[demand]\nper_lane_vph = 1600.0\nmpr = 0.5\n",
            "[sim]\nduration_s = 300.0\ndt_s = 0.5\nseed = 8\npreset = \"D\"\n",
        ))
        .unwrap();
        let result = run(&config).unwrap();
        assert!(result.stats.completed > 50);
        assert_eq!(result.stats.envelope_violations, 0);
        assert_eq!(result.stats.speed_violations, 0);
        assert!(result.stats.min_spacing_m > 0.0);
    }

    #[test]
    fn spawned_vehicles_never_overlap() {
        let (config, _) = parse_scenario(concat!(
            "[corridor]\nlanes = 1\n",
            "[[corridor.links]]\n",
            "[demand]\nper_lane_vph = 2400.0\n",
            "[sim]\nduration_s = 300.0\nseed = 11\npreset = \"C\"\nrecord_trajectories = false\n",
        ))
        .unwrap();
        let result = run(&config).unwrap();
        assert!(result.stats.min_spacing_m > 0.0);
        assert_eq!(result.stats.envelope_violations, 0);
        assert_eq!(result.stats.speed_violations, 0);
    }
}
