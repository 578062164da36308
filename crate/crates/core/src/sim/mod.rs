//! Deterministic discrete-time lane-based traffic simulator.
//!
//! The road is a straight multi-lane course described in lane-local
//! coordinates: `s` runs along the road axis, lane indices count from the
//! rightmost lane (`0`) to the left. The ego vehicle executes one semantic
//! action per decision interval; background vehicles follow the Intelligent
//! Driver Model and never change lanes. Identical `(scenario, config, seed,
//! action sequence)` inputs reproduce bit-identical trajectories.

pub mod idm;
pub mod scenario;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::RngState;
pub use scenario::{build_scenario, BuildError, ScenarioConfig, SimParams};

/// Lane classification. Acceleration lanes are on-ramps: passing on the
/// right is permitted there, entering them from the highway is not, and
/// overrunning their end is a failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneType {
    Normal,
    Acceleration,
}

/// One lane segment: a contiguous stretch of a lane index along the course.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSegment {
    pub id: u32,
    /// Lane index on the cross-section, 0 = rightmost.
    pub index: i64,
    pub lane_type: LaneType,
    pub start_s: f64,
    pub end_s: f64,
}

impl LaneSegment {
    pub fn contains(&self, s: f64) -> bool {
        self.start_s <= s && s <= self.end_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vehicle {
    pub id: u64,
    /// Longitudinal position of the vehicle center (m).
    pub s: f64,
    /// Longitudinal speed (m/s), never negative.
    pub v: f64,
    /// Lane index the vehicle occupies.
    pub lane: i64,
    /// Lateral offset from the lane center (m).
    pub d: f64,
    /// Heading relative to the lane axis (rad).
    pub phi: f64,
    pub length: f64,
    pub is_ego: bool,
    /// Free-flow speed of the background driver (unused for the ego).
    pub desired_speed: f64,
}

impl Vehicle {
    pub fn front(&self) -> f64 {
        self.s + 0.5 * self.length
    }

    pub fn rear(&self) -> f64 {
        self.s - 0.5 * self.length
    }
}

/// The five maneuver actions. The discriminants fix the network output
/// order: 0 accelerate, 1 decelerate, 2 lane change left, 3 lane change
/// right, 4 default (hold speed and lane).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Accelerate = 0,
    Decelerate = 1,
    LaneChangeLeft = 2,
    LaneChangeRight = 3,
    Default = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::Accelerate,
        Action::Decelerate,
        Action::LaneChangeLeft,
        Action::LaneChangeRight,
        Action::Default,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Action::ALL.get(index).copied()
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, Action::LaneChangeLeft | Action::LaneChangeRight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    Highway,
    Merging,
}

impl std::fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScenarioId::Highway => write!(f, "highway"),
            ScenarioId::Merging => write!(f, "merging"),
        }
    }
}

impl std::str::FromStr for ScenarioId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "highway" => Ok(ScenarioId::Highway),
            "merging" => Ok(ScenarioId::Merging),
            other => Err(format!("unknown scenario '{other}' (expected 'highway' or 'merging')")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionKind {
    /// Ego overlaps another vehicle on the same lane.
    VehicleOverlap,
    /// Ego attempted a lane change into a lane that does not exist here.
    OffRoad,
    /// Ego stayed on an acceleration lane past its end.
    RampEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub kind: CollisionKind,
    /// The other vehicle, for `VehicleOverlap`.
    pub other_id: Option<u64>,
}

/// Events observed while executing one decision interval.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    pub collisions: Vec<CollisionEvent>,
}

impl StepEvents {
    pub fn collided(&self) -> bool {
        !self.collisions.is_empty()
    }
}

/// Full simulator ground truth for one running scenario.
#[derive(Debug, Clone)]
pub struct TrafficScene {
    pub scenario: ScenarioId,
    pub lanes: Vec<LaneSegment>,
    pub vehicles: Vec<Vehicle>,
    pub time_step: u64,
    pub course_length: f64,
    /// True while the ego occupies an acceleration lane it entered from the
    /// highway (as opposed to having departed on it).
    pub ego_entered_ramp: bool,
    pub(crate) params: SimParams,
    pub(crate) scenario_config: ScenarioConfig,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) next_vehicle_id: u64,
}

/// Serializable image of a [`TrafficScene`] for run-state snapshots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSnapshot {
    pub scenario: ScenarioId,
    pub lanes: Vec<LaneSegment>,
    pub vehicles: Vec<Vehicle>,
    pub time_step: u64,
    pub course_length: f64,
    pub ego_entered_ramp: bool,
    pub params: SimParams,
    pub scenario_config: ScenarioConfig,
    pub rng: RngState,
    pub next_vehicle_id: u64,
}

impl TrafficScene {
    pub fn ego_index(&self) -> usize {
        self.vehicles
            .iter()
            .position(|v| v.is_ego)
            .expect("scene invariant violated: no ego vehicle")
    }

    pub fn ego(&self) -> &Vehicle {
        &self.vehicles[self.ego_index()]
    }

    pub fn ego_mut(&mut self) -> &mut Vehicle {
        let idx = self.ego_index();
        &mut self.vehicles[idx]
    }

    /// The segment covering lane `index` at longitudinal position `s`.
    pub fn segment_at(&self, index: i64, s: f64) -> Option<&LaneSegment> {
        self.lanes.iter().find(|l| l.index == index && l.contains(s))
    }

    pub fn lane_exists_at(&self, index: i64, s: f64) -> bool {
        self.segment_at(index, s).is_some()
    }

    /// Nearest vehicle strictly ahead on the given lane, together with the
    /// bumper-to-bumper gap. Only leaders within the IDM horizon count.
    pub fn leader_on_lane(&self, lane: i64, s: f64, exclude: u64) -> Option<(&Vehicle, f64)> {
        self.vehicles
            .iter()
            .filter(|v| v.id != exclude && v.lane == lane && v.s > s)
            .min_by(|a, b| {
                a.s.partial_cmp(&b.s)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.id.cmp(&b.id))
            })
            .filter(|v| v.s - s <= self.params.idm.horizon)
            .map(|v| (v, v.s - s))
    }

    pub fn ego_beyond_course(&self) -> bool {
        self.ego().s > self.course_length
    }

    /// Advance one decision interval: execute the ego action, move the
    /// background traffic, then report collision events. Illegal lane
    /// changes are not errors; they surface as `OffRoad` collision events.
    pub fn step(&mut self, ego_action: Action, dt: f64) -> StepEvents {
        let v_max = self.params.v_max;
        let a_cmd = self.params.a_cmd;

        // Ego longitudinal motion: constant commanded acceleration over the
        // interval, speed clamped to [0, v_max] with exact crossing times.
        let ego_accel = match ego_action {
            Action::Accelerate => a_cmd,
            Action::Decelerate => -a_cmd,
            _ => 0.0,
        };
        {
            let ego = self.ego_mut();
            let (v1, ds) = integrate_clamped(ego.v, ego_accel, dt, v_max);
            ego.v = v1;
            ego.s += ds;
        }

        self.advance_background(dt);

        // Lateral motion completes at the interval end as a discrete lane
        // switch; a missing target lane leaves the ego in place.
        let mut change_applied = false;
        if ego_action.is_lane_change() {
            let dir = if ego_action == Action::LaneChangeLeft { 1 } else { -1 };
            let (target, ego_s) = {
                let ego = self.ego();
                (ego.lane + dir, ego.s)
            };
            if let Some(seg) = self.segment_at(target, ego_s) {
                let entered_accel = seg.lane_type == LaneType::Acceleration;
                self.ego_mut().lane = target;
                self.ego_entered_ramp = entered_accel;
                change_applied = true;
            }
        } else if let Some(seg) = self.segment_at(self.ego().lane, self.ego().s) {
            if seg.lane_type == LaneType::Normal {
                self.ego_entered_ramp = false;
            }
        }

        let effective_action = if change_applied { Action::Default } else { ego_action };
        let events = StepEvents { collisions: detect_collision(self, effective_action) };

        self.despawn_departed();
        self.spawn_arrivals(dt);
        self.time_step += 1;
        events
    }

    /// Advance background traffic only (used for randomized departure
    /// delays). The ego is frozen and no events are reported.
    pub fn warmup_step(&mut self, dt: f64) {
        self.advance_background(dt);
        self.despawn_departed();
        self.spawn_arrivals(dt);
        self.time_step += 1;
    }

    fn advance_background(&mut self, dt: f64) {
        let sub_steps = self.params.sub_steps.max(1);
        let dt_sub = dt / sub_steps as f64;
        let idm = self.params.idm;
        let v_max = self.params.v_max;

        for _ in 0..sub_steps {
            // Canonical order: per lane, front to back, ties by id. Leaders
            // move first so the update order is well defined.
            let mut order: Vec<usize> = (0..self.vehicles.len())
                .filter(|&i| !self.vehicles[i].is_ego)
                .collect();
            order.sort_by(|&a, &b| {
                let va = &self.vehicles[a];
                let vb = &self.vehicles[b];
                va.lane
                    .cmp(&vb.lane)
                    .then(vb.s.partial_cmp(&va.s).unwrap_or(std::cmp::Ordering::Equal))
                    .then(va.id.cmp(&vb.id))
            });
            for i in order {
                let (id, lane, s, v, v0, half_len) = {
                    let veh = &self.vehicles[i];
                    (veh.id, veh.lane, veh.s, veh.v, veh.desired_speed, 0.5 * veh.length)
                };
                let leader = self
                    .leader_on_lane(lane, s, id)
                    .map(|(l, center_gap)| (center_gap - half_len - 0.5 * l.length, l.v));
                let accel = idm::idm_accel(&idm, v, v0, leader);
                let (v1, ds) = integrate_clamped(v, accel, dt_sub, v_max);
                let veh = &mut self.vehicles[i];
                veh.v = v1;
                veh.s += ds;
            }
        }
    }

    fn despawn_departed(&mut self) {
        let course = self.course_length;
        self.vehicles.retain(|v| v.is_ego || v.rear() <= course);
    }

    fn spawn_arrivals(&mut self, dt: f64) {
        let rate = self.scenario_config.arrival_rate;
        if rate <= 0.0 {
            return;
        }
        let lanes = self.scenario_config.spawnable_lanes(self.scenario);
        let length = self.scenario_config.vehicle_length;
        let min_gap = self.scenario_config.min_spawn_gap;
        let (lo, hi) = self.scenario_config.speed_range;
        for lane in lanes {
            let n = poisson_draw(&mut self.rng, rate * dt);
            for _ in 0..n {
                let speed = self.rng.gen_range(lo..=hi);
                let spawn_s = 0.5 * length + 0.1;
                let blocked = self.vehicles.iter().any(|v| {
                    v.lane == lane && v.s >= spawn_s && v.rear() - (spawn_s + 0.5 * length) < min_gap
                });
                if blocked {
                    continue;
                }
                let id = self.next_vehicle_id;
                self.next_vehicle_id += 1;
                self.vehicles.push(Vehicle {
                    id,
                    s: spawn_s,
                    v: speed,
                    lane,
                    d: 0.0,
                    phi: 0.0,
                    length,
                    is_ego: false,
                    desired_speed: speed,
                });
            }
        }
    }

    /// Restore a physically consistent state after a collision so the
    /// simulation can continue without a reset: overlap partners are removed
    /// (as if towed away) and a ramp overrun force-merges the ego onto the
    /// adjacent highway lane. The ego keeps its position and velocity.
    pub fn resolve_collision_aftermath(&mut self, events: &StepEvents) {
        for event in &events.collisions {
            match event.kind {
                CollisionKind::VehicleOverlap => {
                    if let Some(other) = event.other_id {
                        self.vehicles.retain(|v| v.id != other);
                    }
                }
                CollisionKind::RampEnd => {
                    let ego_lane = self.ego().lane;
                    let ego_s = self.ego().s;
                    if self.lane_exists_at(ego_lane + 1, ego_s) {
                        self.ego_mut().lane = ego_lane + 1;
                        self.ego_entered_ramp = false;
                    }
                }
                CollisionKind::OffRoad => {}
            }
        }
    }

    pub fn snapshot(&self) -> SceneSnapshot {
        SceneSnapshot {
            scenario: self.scenario,
            lanes: self.lanes.clone(),
            vehicles: self.vehicles.clone(),
            time_step: self.time_step,
            course_length: self.course_length,
            ego_entered_ramp: self.ego_entered_ramp,
            params: self.params,
            scenario_config: self.scenario_config.clone(),
            rng: RngState::capture(&self.rng),
            next_vehicle_id: self.next_vehicle_id,
        }
    }

    pub fn from_snapshot(snap: SceneSnapshot) -> Self {
        TrafficScene {
            scenario: snap.scenario,
            lanes: snap.lanes,
            vehicles: snap.vehicles,
            time_step: snap.time_step,
            course_length: snap.course_length,
            ego_entered_ramp: snap.ego_entered_ramp,
            params: snap.params,
            scenario_config: snap.scenario_config,
            rng: snap.rng.restore(),
            next_vehicle_id: snap.next_vehicle_id,
        }
    }
}

/// Collision check after an update. Reports, in deterministic order:
/// (a) same-lane interval overlap between the ego and any other vehicle,
/// (b) an attempted lane change into a lane that does not exist at the
///     ego's position (the attempt leaves the lane index unchanged),
/// (c) the ego sitting on an acceleration lane past its end.
pub fn detect_collision(scene: &TrafficScene, attempted_action: Action) -> Vec<CollisionEvent> {
    let ego = scene.ego();
    let mut events = Vec::new();

    let mut overlaps: Vec<u64> = scene
        .vehicles
        .iter()
        .filter(|v| !v.is_ego && v.lane == ego.lane)
        .filter(|v| (v.s - ego.s).abs() < 0.5 * (v.length + ego.length))
        .map(|v| v.id)
        .collect();
    overlaps.sort_unstable();
    events.extend(overlaps.into_iter().map(|id| CollisionEvent {
        kind: CollisionKind::VehicleOverlap,
        other_id: Some(id),
    }));

    if attempted_action.is_lane_change() {
        let dir = if attempted_action == Action::LaneChangeLeft { 1 } else { -1 };
        if !scene.lane_exists_at(ego.lane + dir, ego.s) {
            events.push(CollisionEvent { kind: CollisionKind::OffRoad, other_id: None });
        }
    }

    let on_overrun_ramp = scene
        .lanes
        .iter()
        .any(|l| l.lane_type == LaneType::Acceleration && l.index == ego.lane && ego.s > l.end_s)
        && !scene.lane_exists_at(ego.lane, ego.s);
    if on_overrun_ramp {
        events.push(CollisionEvent { kind: CollisionKind::RampEnd, other_id: None });
    }

    events
}

/// Integrate constant acceleration over `dt` with the speed clamped to
/// `[0, v_max]`, resolving the clamp crossing exactly. Returns the new speed
/// and the distance covered.
pub fn integrate_clamped(v0: f64, a: f64, dt: f64, v_max: f64) -> (f64, f64) {
    if a > 0.0 {
        let t_hit = ((v_max - v0) / a).max(0.0);
        if t_hit >= dt {
            (v0 + a * dt, v0 * dt + 0.5 * a * dt * dt)
        } else {
            (v_max, v0 * t_hit + 0.5 * a * t_hit * t_hit + v_max * (dt - t_hit))
        }
    } else if a < 0.0 {
        let t_hit = v0 / (-a);
        if t_hit >= dt {
            (v0 + a * dt, v0 * dt + 0.5 * a * dt * dt)
        } else {
            (0.0, v0 * t_hit + 0.5 * a * t_hit * t_hit)
        }
    } else {
        (v0, v0 * dt)
    }
}

/// Knuth's product-of-uniforms Poisson sampler; exact and deterministic.
fn poisson_draw(rng: &mut ChaCha8Rng, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let limit = (-mean).exp();
    let mut k = 0u32;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}
