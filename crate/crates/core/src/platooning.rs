//! Constant time-gap platoon controller and the dynamic platoon lifecycle.
//!
//! The controller drives the spacing error `e = (gap − s_j) − h·v` to zero
//! with first-order dynamics `de/dt = −λe`, which gives the control law
//! `a = (λe + Δv)/h`. An optional flag inverts the gain sign to reproduce
//! the divergent variant of the law for analysis.
//!
//! The lifecycle is event-based: a per-lane scan inspects the ordered
//! vehicles front to rear and emits formation, join and split events which
//! the engine applies under exclusive world access. Events are totally
//! ordered by (time, lane, position), which keeps runs reproducible.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Simulation-unique vehicle identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VehicleId(pub u64);

/// Simulation-unique platoon identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PlatoonId(pub u64);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::fmt::Display for PlatoonId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Resolved gap-policy and lifecycle parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    /// Desired bumper time gap, s.
    pub desired_time_gap_s: f64,
    /// Error-decay gain λ, 1/s, strictly positive.
    pub gain_per_s: f64,
    /// Jam spacing subtracted from the front-to-front gap, m.
    pub jam_spacing_m: f64,
    /// Speed multiplier granted to an active joiner (>= 1).
    pub boost_factor: f64,
    /// Maximum duration of a join attempt, s.
    pub join_window_s: f64,
    /// Maximum platoon size; `None` is unlimited.
    pub max_platoon_size: Option<u32>,
    /// Absolute gap-error threshold for a join to commit, m.
    pub join_epsilon_m: f64,
    /// How far ahead (front-to-front) a platoon tail is detected, m.
    pub detection_range_m: f64,
    /// Aerodynamic-drag multiplier applied to platoon followers in the fuel
    /// accounting only. 1.0 disables the effect.
    pub follower_drag_factor: f64,
    /// Invert the sign of the gain term. This yields `de/dt = +λe`, a
    /// divergent error law; for analysis only.
    pub inverted_gain_sign: bool,
}

impl Default for ControllerParams {
    fn default() -> Self {
        ControllerParams {
            desired_time_gap_s: 0.6,
            gain_per_s: 0.5,
            jam_spacing_m: 1000.0 / 180.0,
            boost_factor: 1.07,
            join_window_s: 6.5,
            max_platoon_size: Some(22),
            join_epsilon_m: 0.5,
            detection_range_m: 120.0,
            follower_drag_factor: 1.0,
            inverted_gain_sign: false,
        }
    }
}

impl ControllerParams {
    pub fn validate(&self) -> Result<(), crate::ConfigError> {
        use crate::ConfigError;
        if !(self.desired_time_gap_s > 0.0) {
            return Err(ConfigError::invalid(
                "controller.desired_time_gap_s",
                "must be strictly positive",
            ));
        }
        if !(self.gain_per_s > 0.0) {
            return Err(ConfigError::invalid(
                "controller.gain_per_s",
                "must be strictly positive",
            ));
        }
        if !(self.jam_spacing_m > 0.0) {
            return Err(ConfigError::invalid(
                "controller.jam_spacing_m",
                "must be strictly positive",
            ));
        }
        if !(self.boost_factor >= 1.0) {
            return Err(ConfigError::invalid(
                "controller.boost_factor",
                "must be >= 1",
            ));
        }
        if !(self.join_window_s > 0.0) {
            return Err(ConfigError::invalid(
                "controller.join_window_s",
                "must be strictly positive",
            ));
        }
        if let Some(cap) = self.max_platoon_size {
            if cap < 2 {
                return Err(ConfigError::invalid(
                    "controller.max_platoon_size",
                    "must be >= 2 when set (0 in a scenario file means unlimited)",
                ));
            }
        }
        if !(self.join_epsilon_m > 0.0) {
            return Err(ConfigError::invalid(
                "controller.join_epsilon_m",
                "must be strictly positive",
            ));
        }
        if !(self.detection_range_m > 0.0) {
            return Err(ConfigError::invalid(
                "controller.detection_range_m",
                "must be strictly positive",
            ));
        }
        if !(self.follower_drag_factor > 0.0 && self.follower_drag_factor <= 1.0) {
            return Err(ConfigError::invalid(
                "controller.follower_drag_factor",
                "must be in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Join window expressed in whole steps of `dt`.
    pub fn join_window_steps(&self, dt: f64) -> u64 {
        (self.join_window_s / dt).round() as u64
    }
}

/// Distance-gap form of the spacing error: `e = (x_lead − x_n − s_j) − h·v_n`.
/// Positive means the gap is larger than policy.
#[inline]
pub fn gap_error(x_n: f64, v_n: f64, x_lead: f64, ctrl: &ControllerParams) -> f64 {
    (x_lead - x_n - ctrl.jam_spacing_m) - ctrl.desired_time_gap_s * v_n
}

/// Raw candidate acceleration of the gap controller. Constraint clamping
/// happens downstream in the engine.
#[inline]
pub fn cacc_accel(x_n: f64, v_n: f64, x_lead: f64, v_lead: f64, ctrl: &ControllerParams) -> f64 {
    let e = gap_error(x_n, v_n, x_lead, ctrl);
    let gain = if ctrl.inverted_gain_sign {
        -ctrl.gain_per_s
    } else {
        ctrl.gain_per_s
    };
    (gain * e + (v_lead - v_n)) / ctrl.desired_time_gap_s
}

/// Target-speed ceiling: joiners may exceed the limit by the boost factor
/// for the duration of the attempt; everything downstream still applies.
#[inline]
pub fn join_target_speed(v_limit: f64, attempt_active: bool, ctrl: &ControllerParams) -> f64 {
    debug_assert!(v_limit > 0.0);
    if attempt_active {
        ctrl.boost_factor * v_limit
    } else {
        v_limit
    }
}

/// A pending attempt by an unattached vehicle to join a platoon's tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JoinAttempt {
    pub vehicle: VehicleId,
    pub target: PlatoonId,
    pub start_step: u64,
}

/// One platoon: an ordered, lane-contiguous string of vehicles with the
/// first member as leader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlatoonState {
    pub id: PlatoonId,
    /// Members front to rear; `members[0]` is the leader.
    pub members: Vec<VehicleId>,
    pub lane: u32,
    /// Link the platoon is registered on (the leader's link at creation).
    pub link: usize,
    pub created_s: f64,
}

impl PlatoonState {
    #[inline]
    pub fn leader(&self) -> VehicleId {
        self.members[0]
    }

    #[inline]
    pub fn tail(&self) -> VehicleId {
        *self.members.last().expect("platoon is never empty")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.members.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Platoon lifecycle events, in the order the scan emits them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PlatoonEvent {
    /// An unattached CACC vehicle becomes the leader of a new platoon.
    Form {
        vehicle: VehicleId,
        platoon: PlatoonId,
    },
    /// A CACC vehicle behind a platoon tail begins a join attempt.
    JoinStart {
        vehicle: VehicleId,
        platoon: PlatoonId,
    },
    /// The attempt converged; the vehicle is appended as the new tail.
    JoinCommit {
        vehicle: VehicleId,
        platoon: PlatoonId,
    },
    /// The attempt timed out; the vehicle leads a new platoon instead.
    JoinAbort {
        vehicle: VehicleId,
        abandoned: PlatoonId,
        new_platoon: PlatoonId,
    },
    /// Joining would exceed the size cap; the joiner leads a new platoon.
    SplitCap {
        vehicle: VehicleId,
        refused: PlatoonId,
        new_platoon: PlatoonId,
    },
    /// The leader crossed a link boundary on a disconnected-link preset:
    /// the platoon dissolves and re-forms on the new link under the same
    /// leader; trailing members re-join through fresh attempts.
    SplitBoundary {
        platoon: PlatoonId,
        leader: VehicleId,
        new_platoon: PlatoonId,
        link: usize,
    },
    /// A member left the corridor; trailing members continue under the
    /// first trailing vehicle as leader.
    SplitExit {
        vehicle: VehicleId,
        platoon: PlatoonId,
        remaining: usize,
    },
}

impl PlatoonEvent {
    /// Event name as serialized into `events.csv`.
    pub fn name(&self) -> &'static str {
        match self {
            PlatoonEvent::Form { .. } => "FORM",
            PlatoonEvent::JoinStart { .. } => "JOIN_START",
            PlatoonEvent::JoinCommit { .. } => "JOIN_COMMIT",
            PlatoonEvent::JoinAbort { .. } => "JOIN_ABORT",
            PlatoonEvent::SplitCap { .. } => "SPLIT_CAP",
            PlatoonEvent::SplitBoundary { .. } => "SPLIT_BOUNDARY",
            PlatoonEvent::SplitExit { .. } => "SPLIT_EXIT",
        }
    }

    /// The vehicle the event is about.
    pub fn vehicle(&self) -> VehicleId {
        match *self {
            PlatoonEvent::Form { vehicle, .. }
            | PlatoonEvent::JoinStart { vehicle, .. }
            | PlatoonEvent::JoinCommit { vehicle, .. }
            | PlatoonEvent::JoinAbort { vehicle, .. }
            | PlatoonEvent::SplitCap { vehicle, .. }
            | PlatoonEvent::SplitExit { vehicle, .. } => vehicle,
            PlatoonEvent::SplitBoundary { leader, .. } => leader,
        }
    }

    /// The platoon the vehicle ends up associated with (new platoon for
    /// splits and aborts), if any.
    pub fn platoon(&self) -> PlatoonId {
        match *self {
            PlatoonEvent::Form { platoon, .. }
            | PlatoonEvent::JoinStart { platoon, .. }
            | PlatoonEvent::JoinCommit { platoon, .. }
            | PlatoonEvent::SplitExit { platoon, .. } => platoon,
            PlatoonEvent::JoinAbort { new_platoon, .. }
            | PlatoonEvent::SplitCap { new_platoon, .. }
            | PlatoonEvent::SplitBoundary { new_platoon, .. } => new_platoon,
        }
    }
}

/// All live platoons, keyed by id. Single-writer: only the engine mutates
/// it, between steps.
#[derive(Debug, Clone, Default)]
pub struct PlatoonRegistry {
    platoons: BTreeMap<PlatoonId, PlatoonState>,
    next_id: u64,
}

impl PlatoonRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// The id the next created platoon will get. The scan uses this to name
    /// platoons in its events without mutating anything.
    pub fn peek_next_id(&self) -> u64 {
        self.next_id
    }

    pub fn create(
        &mut self,
        id: PlatoonId,
        leader: VehicleId,
        lane: u32,
        link: usize,
        created_s: f64,
    ) {
        assert_eq!(id.0, self.next_id, "platoon ids must be allocated in order");
        self.next_id += 1;
        self.platoons.insert(
            id,
            PlatoonState {
                id,
                members: vec![leader],
                lane,
                link,
                created_s,
            },
        );
    }

    pub fn append_member(&mut self, id: PlatoonId, vehicle: VehicleId) {
        self.platoons
            .get_mut(&id)
            .expect("appending to a live platoon")
            .members
            .push(vehicle);
    }

    pub fn remove(&mut self, id: PlatoonId) -> PlatoonState {
        self.platoons.remove(&id).expect("removing a live platoon")
    }

    /// Remove the platoon's current leader (it left the corridor) and
    /// promote the first trailing member. Drops the platoon when empty.
    /// Returns the remaining member count.
    pub fn remove_leader(&mut self, id: PlatoonId) -> usize {
        let platoon = self
            .platoons
            .get_mut(&id)
            .expect("removing leader of a live platoon");
        platoon.members.remove(0);
        let remaining = platoon.members.len();
        if remaining == 0 {
            self.platoons.remove(&id);
        }
        remaining
    }

    pub fn get(&self, id: PlatoonId) -> Option<&PlatoonState> {
        self.platoons.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &PlatoonState> {
        self.platoons.values()
    }

    pub fn len(&self) -> usize {
        self.platoons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.platoons.is_empty()
    }
}

/// Read-only view of one vehicle as the scan needs it.
#[derive(Debug, Clone, Copy)]
pub struct ScanVehicle {
    pub id: VehicleId,
    pub is_cacc: bool,
    pub x: f64,
    pub v: f64,
    /// Speed limit of the vehicle's link, m/s (bounds the join boost).
    pub v_limit: f64,
    pub link: usize,
    pub platoon: Option<PlatoonId>,
    pub attempt: Option<JoinAttempt>,
}

/// Scan parameters for one lane.
#[derive(Debug, Clone, Copy)]
pub struct ScanContext<'a> {
    pub registry: &'a PlatoonRegistry,
    pub ctrl: &'a ControllerParams,
    pub lane: u32,
    pub lane_platooning: bool,
    /// Platooning is per-link: platoons never span a link boundary and are
    /// dissolved when their leader crosses one.
    pub disconnected_links: bool,
    pub now_step: u64,
    pub dt: f64,
}

/// What one scan decided: events to log and apply, plus silent retargets of
/// attempts whose nearest platoon changed (the attempt clock keeps running).
#[derive(Debug, Clone, Default)]
pub struct ScanOutcome {
    pub events: Vec<PlatoonEvent>,
    pub retargets: Vec<(VehicleId, PlatoonId)>,
}

impl ScanOutcome {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty() && self.retargets.is_empty()
    }
}

/// Nearest effective platoon ahead of the scan position.
struct ChainAhead {
    platoon: PlatoonId,
    tail_x: f64,
    tail_v: f64,
    size: usize,
    link: usize,
    /// Only active joiners between the tail and the scan position.
    joiners_only: bool,
    /// The vehicle immediately ahead of the scan position is the tail.
    prev_is_tail: bool,
}

/// Scan one lane (vehicles ordered front to rear) and decide lifecycle
/// transitions. Mutates nothing; the engine applies the outcome.
///
/// New platoon ids are assigned deterministically starting at
/// `registry.peek_next_id()`, in emission order.
pub fn platoon_scan(vehicles: &[ScanVehicle], ctx: &ScanContext) -> ScanOutcome {
    let mut out = ScanOutcome::default();
    let mut next_id = ctx.registry.peek_next_id();
    let mut alloc = || {
        let id = PlatoonId(next_id);
        next_id += 1;
        id
    };
    // Platoons dissolved this scan (boundary splits): old id -> re-formed id.
    let mut reformed: BTreeMap<PlatoonId, PlatoonId> = BTreeMap::new();
    let mut chain: Option<ChainAhead> = None;
    let window = ctx.ctrl.join_window_steps(ctx.dt);

    for (i, v) in vehicles.iter().enumerate() {
        debug_assert!(
            i == 0 || vehicles[i - 1].x > v.x,
            "scan input must be ordered front to rear"
        );

        // Effective state of this vehicle entering the scan.
        let dissolved_into = v.platoon.and_then(|p| reformed.get(&p).copied());
        if let Some(new_platoon) = dissolved_into {
            // Former member of a platoon that dissolved at a boundary this
            // scan: re-join the re-formed platoon through a fresh attempt.
            // Detection range is waived; the vehicles were just co-members.
            out.events.push(PlatoonEvent::JoinStart {
                vehicle: v.id,
                platoon: new_platoon,
            });
            advance_chain_joiner(&mut chain);
            continue;
        }

        if let Some(pid) = v.platoon {
            let platoon = ctx
                .registry
                .get(pid)
                .expect("member references a live platoon");
            let is_leader = platoon.leader() == v.id;
            if is_leader && ctx.disconnected_links && v.link != platoon.link {
                // Leader crossed a link boundary: dissolve and re-form.
                let new_platoon = alloc();
                out.events.push(PlatoonEvent::SplitBoundary {
                    platoon: pid,
                    leader: v.id,
                    new_platoon,
                    link: v.link,
                });
                reformed.insert(pid, new_platoon);
                chain = Some(ChainAhead {
                    platoon: new_platoon,
                    tail_x: v.x,
                    tail_v: v.v,
                    size: 1,
                    link: v.link,
                    joiners_only: true,
                    prev_is_tail: true,
                });
                continue;
            }
            // A lone one-vehicle platoon behaves like a free agent: it may
            // abandon its own platoon to join a platoon ahead (the engine
            // drops the abandoned singleton when the attempt starts).
            if is_leader && platoon.len() == 1 && ctx.lane_platooning {
                if let Some(target) = joinable_target(&chain, v, ctx) {
                    if target != pid {
                        out.events.push(PlatoonEvent::JoinStart {
                            vehicle: v.id,
                            platoon: target,
                        });
                        advance_chain_joiner(&mut chain);
                        continue;
                    }
                }
            }
            // Ordinary member: it extends (or starts) the chain of its own
            // platoon; the rearmost member seen becomes the tail.
            match &mut chain {
                Some(c) if c.platoon == pid => {
                    c.tail_x = v.x;
                    c.tail_v = v.v;
                    c.size += 1;
                    c.joiners_only = true;
                    c.prev_is_tail = true;
                }
                _ => {
                    chain = Some(ChainAhead {
                        platoon: pid,
                        tail_x: v.x,
                        tail_v: v.v,
                        size: 1,
                        link: platoon.link,
                        joiners_only: true,
                        prev_is_tail: true,
                    });
                }
            }
            continue;
        }

        if !v.is_cacc || !ctx.lane_platooning {
            // Chain broken: nothing behind this vehicle can reach the tail.
            if let Some(c) = &mut chain {
                c.joiners_only = false;
                c.prev_is_tail = false;
            }
            continue;
        }

        // Unattached CACC vehicle on a platooning lane.
        let target = chain
            .as_ref()
            .filter(|c| c.joiners_only)
            .map(|c| (c.platoon, c.tail_x, c.size, c.link, c.prev_is_tail));

        if let Some(attempt) = v.attempt {
            match target {
                None => {
                    // Nothing joinable ahead anymore: resolve as an abort
                    // and lead a new platoon.
                    let new_platoon = alloc();
                    out.events.push(PlatoonEvent::JoinAbort {
                        vehicle: v.id,
                        abandoned: attempt.target,
                        new_platoon,
                    });
                    start_chain(&mut chain, new_platoon, v);
                }
                Some((pid, tail_x, size, link, prev_is_tail)) => {
                    if pid != attempt.target {
                        out.retargets.push((v.id, pid));
                    }
                    let age = ctx.now_step.saturating_sub(attempt.start_step);
                    let cap_full = ctx
                        .ctrl
                        .max_platoon_size
                        .is_some_and(|cap| size >= cap as usize);
                    let converged = prev_is_tail
                        && age >= 1
                        && gap_error(v.x, v.v, tail_x, ctx.ctrl).abs() <= ctx.ctrl.join_epsilon_m
                        && (!ctx.disconnected_links || v.link == link);
                    if converged && !cap_full {
                        out.events.push(PlatoonEvent::JoinCommit {
                            vehicle: v.id,
                            platoon: pid,
                        });
                        if let Some(c) = &mut chain {
                            c.tail_x = v.x;
                            c.tail_v = v.v;
                            c.size += 1;
                            c.prev_is_tail = true;
                        }
                    } else if converged && cap_full {
                        let new_platoon = alloc();
                        out.events.push(PlatoonEvent::SplitCap {
                            vehicle: v.id,
                            refused: pid,
                            new_platoon,
                        });
                        start_chain(&mut chain, new_platoon, v);
                    } else if age > window {
                        let new_platoon = alloc();
                        out.events.push(PlatoonEvent::JoinAbort {
                            vehicle: v.id,
                            abandoned: attempt.target,
                            new_platoon,
                        });
                        start_chain(&mut chain, new_platoon, v);
                    } else {
                        advance_chain_joiner(&mut chain);
                    }
                }
            }
            continue;
        }

        // No attempt yet: start one, refuse against a full platoon, or lead
        // a new platoon when nothing is in reach.
        match joinable_target_or_refusal(&chain, v, ctx) {
            JoinDecision::Start(pid) => {
                out.events.push(PlatoonEvent::JoinStart {
                    vehicle: v.id,
                    platoon: pid,
                });
                advance_chain_joiner(&mut chain);
            }
            JoinDecision::Refused(pid) => {
                let new_platoon = alloc();
                out.events.push(PlatoonEvent::SplitCap {
                    vehicle: v.id,
                    refused: pid,
                    new_platoon,
                });
                start_chain(&mut chain, new_platoon, v);
            }
            JoinDecision::Lead => {
                let new_platoon = alloc();
                out.events.push(PlatoonEvent::Form {
                    vehicle: v.id,
                    platoon: new_platoon,
                });
                start_chain(&mut chain, new_platoon, v);
            }
        }
    }

    out
}

enum JoinDecision {
    Start(PlatoonId),
    Refused(PlatoonId),
    Lead,
}

/// Whether the vehicle can realistically converge to the chain's tail
/// within the join window at the boosted speed.
fn reachable(tail_x: f64, tail_v: f64, v: &ScanVehicle, ctx: &ScanContext) -> bool {
    let closure = (ctx.ctrl.boost_factor * v.v_limit - tail_v).max(0.0) * ctx.ctrl.join_window_s;
    gap_error(v.x, v.v, tail_x, ctx.ctrl) <= closure
}

/// Attempt-start decision for a vehicle without an active attempt: the
/// nearest joinable chain, cap refusal, or leading a new platoon.
fn joinable_target_or_refusal(
    chain: &Option<ChainAhead>,
    v: &ScanVehicle,
    ctx: &ScanContext,
) -> JoinDecision {
    let Some(c) = chain.as_ref().filter(|c| c.joiners_only) else {
        return JoinDecision::Lead;
    };
    if c.tail_x - v.x > ctx.ctrl.detection_range_m || !reachable(c.tail_x, c.tail_v, v, ctx) {
        return JoinDecision::Lead;
    }
    let cap_full = ctx
        .ctrl
        .max_platoon_size
        .is_some_and(|cap| c.size >= cap as usize);
    if cap_full {
        JoinDecision::Refused(c.platoon)
    } else {
        JoinDecision::Start(c.platoon)
    }
}

/// Like [`joinable_target_or_refusal`] but for a lone platoon leader, which
/// only abandons its platoon for a startable (non-refused) target.
fn joinable_target(
    chain: &Option<ChainAhead>,
    v: &ScanVehicle,
    ctx: &ScanContext,
) -> Option<PlatoonId> {
    match joinable_target_or_refusal(chain, v, ctx) {
        JoinDecision::Start(pid) => Some(pid),
        _ => None,
    }
}

fn start_chain(chain: &mut Option<ChainAhead>, platoon: PlatoonId, v: &ScanVehicle) {
    *chain = Some(ChainAhead {
        platoon,
        tail_x: v.x,
        tail_v: v.v,
        size: 1,
        link: v.link,
        joiners_only: true,
        prev_is_tail: true,
    });
}

fn advance_chain_joiner(chain: &mut Option<ChainAhead>) {
    if let Some(c) = chain {
        // An active joiner keeps the chain intact but is not the tail.
        c.prev_is_tail = false;
    }
}
