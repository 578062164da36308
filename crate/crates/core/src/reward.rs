//! Prioritized, parameterized reward.
//!
//! Every transition falls into exactly one class: collision states pay only
//! the weighted collision penalty, rule-violation states pay only the
//! triggered rule penalties, and nominal states collect the driving-style
//! terms (velocity tracking plus a small penalty for non-default actions).
//! Masking lower-priority terms keeps the credit assignment clean: driving
//! at the desired speed never offsets a crash.
//!
//! The rule set follows German highway traffic: keep right when the right
//! lane is free, do not pass on the right, keep a safe distance, and do not
//! enter an acceleration lane from the highway. On the acceleration lane
//! itself passing right is allowed and the keep-right obligation is lifted.

use serde::{Deserialize, Serialize};

use crate::sim::{detect_collision, Action, LaneType, StepEvents, TrafficScene};

/// Reward parameter vector: per-term weights, the desired speed, term
/// magnitudes and rule thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    /// Weight of the collision penalty.
    pub theta_t: f64,
    /// Weight of the pass-right penalty.
    pub theta_p: f64,
    /// Weight of the ramp-entry penalty.
    pub theta_n: f64,
    /// Weight of the safe-distance penalty.
    pub theta_s: f64,
    /// Weight of the keep-right penalty.
    pub theta_k: f64,
    /// Weight of the action-change penalty.
    pub theta_a: f64,
    /// Desired speed (m/s); resampled by the harness at every reset.
    pub theta_v: f64,
    pub magnitudes: RewardMagnitudes,
    pub thresholds: RuleThresholds,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            theta_t: 1.0,
            theta_p: 1.0,
            theta_n: 1.0,
            theta_s: 1.0,
            theta_k: 1.0,
            theta_a: 1.0,
            theta_v: 25.0,
            magnitudes: RewardMagnitudes::default(),
            thresholds: RuleThresholds::default(),
        }
    }
}

/// Base magnitudes of the reward terms; kept within [-1, 1] per step so TD
/// targets stay small at gamma = 0.9.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardMagnitudes {
    pub r_collision: f64,
    pub pass_right_penalty: f64,
    pub not_enter_penalty: f64,
    pub safe_distance_penalty: f64,
    pub keep_right_penalty: f64,
    /// Peak of the velocity term, earned exactly at the desired speed.
    pub velocity_reward_max: f64,
    /// Speed divergence (m/s) beyond which the velocity term is zero.
    pub omega_cap: f64,
    /// Penalty base for any non-default action.
    pub action_penalty: f64,
}

impl Default for RewardMagnitudes {
    fn default() -> Self {
        Self {
            r_collision: -1.0,
            pass_right_penalty: -0.5,
            not_enter_penalty: -0.5,
            safe_distance_penalty: -0.5,
            keep_right_penalty: -0.5,
            velocity_reward_max: 1.0,
            omega_cap: 10.0,
            action_penalty: -0.05,
        }
    }
}

/// Detection thresholds for the rule checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleThresholds {
    /// Time headway below which the gap to the leader is unsafe (s).
    pub t_safe: f64,
    /// Longitudinal window for counting a pass on the right (m, each way).
    pub pass_right_window: f64,
    /// Free-gap window ahead on the right lane for the keep-right check (m).
    pub keep_right_ahead: f64,
    /// Free-gap window behind on the right lane for the keep-right check (m).
    pub keep_right_behind: f64,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        Self {
            t_safe: 1.8,
            pass_right_window: 20.0,
            keep_right_ahead: 40.0,
            keep_right_behind: 20.0,
        }
    }
}

/// Priority class of a transition; collision dominates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateClass {
    Collision,
    RuleViolation,
    Nominal,
}

/// Which traffic rules the current state violates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleFlags {
    pub pass_right: bool,
    pub not_enter: bool,
    pub safe_distance: bool,
    pub keep_right: bool,
}

impl RuleFlags {
    pub fn any(&self) -> bool {
        self.pass_right || self.not_enter || self.safe_distance || self.keep_right
    }
}

fn ego_on_acceleration_lane(scene: &TrafficScene) -> bool {
    let ego = scene.ego();
    scene
        .segment_at(ego.lane, ego.s)
        .map(|seg| seg.lane_type == LaneType::Acceleration)
        .unwrap_or(false)
}

/// Evaluate the traffic-rule flags on the current scene.
pub fn check_rules(scene: &TrafficScene, params: &RewardParams) -> RuleFlags {
    let ego = scene.ego();
    let th = &params.thresholds;
    let on_ramp = ego_on_acceleration_lane(scene);

    // Passing on the right: driving faster than anyone on a lane strictly
    // left of the ego within the window. Counted even without a completed
    // overtake; never counted on an acceleration lane.
    let pass_right = !on_ramp
        && scene.vehicles.iter().any(|v| {
            !v.is_ego
                && v.lane > ego.lane
                && (v.s - ego.s).abs() <= th.pass_right_window
                && ego.v > v.v
        });

    // Entering the acceleration lane from the highway is forbidden; having
    // departed on it is not.
    let not_enter = on_ramp && scene.ego_entered_ramp;

    let safe_distance = match scene.leader_on_lane(ego.lane, ego.s, ego.id) {
        Some((leader, center_gap)) => {
            let gap = center_gap - 0.5 * (leader.length + ego.length);
            gap < th.t_safe * ego.v
        }
        None => false,
    };

    // Keep right: the immediate right lane exists, is a normal lane, and is
    // free around the ego, yet the ego is not using it.
    let keep_right = match scene.segment_at(ego.lane - 1, ego.s) {
        Some(seg) if seg.lane_type == LaneType::Normal => !scene.vehicles.iter().any(|v| {
            !v.is_ego
                && v.lane == ego.lane - 1
                && v.s - ego.s <= th.keep_right_ahead
                && ego.s - v.s <= th.keep_right_behind
        }),
        _ => false,
    };

    RuleFlags { pass_right, not_enter, safe_distance, keep_right }
}

/// Classify a post-step scene given the attempted action and rule flags.
pub fn classify(scene: &TrafficScene, attempted_action: Action, flags: RuleFlags) -> StateClass {
    let events = StepEvents { collisions: detect_collision(scene, attempted_action) };
    classify_events(&events, flags)
}

/// Classification from already-detected step events.
pub fn classify_events(events: &StepEvents, flags: RuleFlags) -> StateClass {
    if events.collided() {
        StateClass::Collision
    } else if flags.any() {
        StateClass::RuleViolation
    } else {
        StateClass::Nominal
    }
}

/// Velocity term: maximal at the desired speed and strictly decreasing in
/// the speed divergence, linearly through zero at `omega_cap` down to the
/// negative peak magnitude (reached at twice the cap). The negative branch
/// keeps a learning signal alive even far away from the desired speed.
pub fn velocity_reward(params: &RewardParams, ego_speed: f64) -> f64 {
    let omega = params.theta_v - ego_speed;
    let m = &params.magnitudes;
    m.velocity_reward_max * (1.0 - omega.abs() / m.omega_cap).clamp(-1.0, 1.0)
}

/// Reward for one classified transition. Only the terms of the active
/// priority class contribute; `prev_action` is part of the call contract but
/// the action penalty keys off the commanded action alone (any non-default
/// action counts as a lane or velocity change).
pub fn compute_reward(
    class: StateClass,
    scene: &TrafficScene,
    action: Action,
    _prev_action: Action,
    params: &RewardParams,
) -> f64 {
    let m = &params.magnitudes;
    match class {
        StateClass::Collision => params.theta_t * m.r_collision,
        StateClass::RuleViolation => {
            let flags = check_rules(scene, params);
            let mut r = 0.0;
            if flags.pass_right {
                r += params.theta_p * m.pass_right_penalty;
            }
            if flags.not_enter {
                r += params.theta_n * m.not_enter_penalty;
            }
            if flags.safe_distance {
                r += params.theta_s * m.safe_distance_penalty;
            }
            if flags.keep_right {
                r += params.theta_k * m.keep_right_penalty;
            }
            r
        }
        StateClass::Nominal => {
            let action_term = if action == Action::Default {
                0.0
            } else {
                params.theta_a * m.action_penalty
            };
            action_term + velocity_reward(params, scene.ego().v)
        }
    }
}

/// Per-term decomposition for traces and debugging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub class: StateClass,
    pub total: f64,
    pub collision: f64,
    pub pass_right: f64,
    pub not_enter: f64,
    pub safe_distance: f64,
    pub keep_right: f64,
    pub action: f64,
    pub velocity: f64,
}

pub fn reward_breakdown(
    class: StateClass,
    scene: &TrafficScene,
    action: Action,
    params: &RewardParams,
) -> RewardBreakdown {
    let m = &params.magnitudes;
    let mut b = RewardBreakdown {
        class,
        total: 0.0,
        collision: 0.0,
        pass_right: 0.0,
        not_enter: 0.0,
        safe_distance: 0.0,
        keep_right: 0.0,
        action: 0.0,
        velocity: 0.0,
    };
    match class {
        StateClass::Collision => b.collision = params.theta_t * m.r_collision,
        StateClass::RuleViolation => {
            let flags = check_rules(scene, params);
            if flags.pass_right {
                b.pass_right = params.theta_p * m.pass_right_penalty;
            }
            if flags.not_enter {
                b.not_enter = params.theta_n * m.not_enter_penalty;
            }
            if flags.safe_distance {
                b.safe_distance = params.theta_s * m.safe_distance_penalty;
            }
            if flags.keep_right {
                b.keep_right = params.theta_k * m.keep_right_penalty;
            }
        }
        StateClass::Nominal => {
            if action != Action::Default {
                b.action = params.theta_a * m.action_penalty;
            }
            b.velocity = velocity_reward(params, scene.ego().v);
        }
    }
    b.total = b.collision + b.pass_right + b.not_enter + b.safe_distance + b.keep_right
        + b.action
        + b.velocity;
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_scenario, ScenarioConfig, ScenarioId, SimParams, Vehicle};

    fn highway_scene() -> TrafficScene {
        let mut cfg = ScenarioConfig::highway_default();
        cfg.density = 0.0;
        cfg.arrival_rate = 0.0;
        build_scenario(ScenarioId::Highway, &cfg, &SimParams::default(), 0).unwrap()
    }

    fn merging_scene() -> TrafficScene {
        let mut cfg = ScenarioConfig::merging_default();
        cfg.density = 0.0;
        cfg.arrival_rate = 0.0;
        build_scenario(ScenarioId::Merging, &cfg, &SimParams::default(), 0).unwrap()
    }

    fn push_vehicle(scene: &mut TrafficScene, id: u64, lane: i64, s: f64, v: f64) {
        scene.vehicles.push(Vehicle {
            id,
            s,
            v,
            lane,
            d: 0.0,
            phi: 0.0,
            length: 4.5,
            is_ego: false,
            desired_speed: v,
        });
    }

    #[test]
    fn faster_than_left_neighbor_flags_pass_right() {
        let mut scene = highway_scene();
        scene.ego_mut().s = 200.0;
        scene.ego_mut().lane = 0;
        scene.ego_mut().v = 25.0;
        push_vehicle(&mut scene, 1, 1, 210.0, 20.0);
        let flags = check_rules(&scene, &RewardParams::default());
        assert!(flags.pass_right);

        // Outside the window it does not count.
        scene.vehicles.last_mut().unwrap().s = 230.0;
        assert!(!check_rules(&scene, &RewardParams::default()).pass_right);

        // Slower than the left vehicle is fine.
        scene.vehicles.last_mut().unwrap().s = 210.0;
        scene.ego_mut().v = 18.0;
        assert!(!check_rules(&scene, &RewardParams::default()).pass_right);
    }

    #[test]
    fn ramp_departure_allows_passing_right_without_not_enter() {
        let mut scene = merging_scene();
        // Ego departed on the ramp (lane 0); a slower highway vehicle on
        // lane 1 right next to it.
        scene.ego_mut().v = 15.0;
        scene.ego_mut().s = 100.0;
        push_vehicle(&mut scene, 1, 1, 105.0, 10.0);
        let flags = check_rules(&scene, &RewardParams::default());
        assert!(!flags.pass_right, "passing right is allowed on the acceleration lane");
        assert!(!flags.not_enter, "the ego departed on the ramp");
    }

    #[test]
    fn entering_the_ramp_from_the_highway_is_flagged() {
        let mut scene = merging_scene();
        scene.ego_mut().lane = 1;
        scene.ego_mut().s = 100.0;
        scene.ego_mut().v = 15.0;
        let events = scene.step(Action::LaneChangeRight, 1.0);
        assert!(!events.collided());
        assert_eq!(scene.ego().lane, 0);
        assert!(scene.ego_entered_ramp);
        let flags = check_rules(&scene, &RewardParams::default());
        assert!(flags.not_enter);
    }

    #[test]
    fn ego_alone_on_rightmost_lane_is_clean() {
        let mut scene = highway_scene();
        scene.ego_mut().lane = 0;
        let flags = check_rules(&scene, &RewardParams::default());
        assert_eq!(flags, RuleFlags::default());
    }

    #[test]
    fn tailgating_flags_safe_distance() {
        let mut scene = highway_scene();
        scene.ego_mut().s = 200.0;
        scene.ego_mut().v = 20.0;
        // Bumper gap 15.5 m < 1.8 s * 20 m/s.
        push_vehicle(&mut scene, 1, 0, 220.0, 20.0);
        assert!(check_rules(&scene, &RewardParams::default()).safe_distance);
        // A generous gap is fine.
        scene.vehicles.last_mut().unwrap().s = 260.0;
        assert!(!check_rules(&scene, &RewardParams::default()).safe_distance);
    }

    #[test]
    fn free_right_lane_flags_keep_right() {
        let mut scene = highway_scene();
        scene.ego_mut().lane = 1;
        scene.ego_mut().s = 300.0;
        assert!(check_rules(&scene, &RewardParams::default()).keep_right);

        // An occupied right lane suspends the obligation.
        push_vehicle(&mut scene, 1, 0, 310.0, 25.0);
        assert!(!check_rules(&scene, &RewardParams::default()).keep_right);
    }

    #[test]
    fn classification_priorities() {
        // Collision dominates rule violations.
        let mut scene = highway_scene();
        scene.ego_mut().s = 200.0;
        scene.ego_mut().lane = 1;
        push_vehicle(&mut scene, 1, 1, 202.0, 0.0);
        let flags =
            RuleFlags { safe_distance: true, keep_right: true, ..RuleFlags::default() };
        assert_eq!(classify(&scene, Action::Default, flags), StateClass::Collision);

        // Rule violation without collision.
        let scene = highway_scene();
        let flags = RuleFlags { safe_distance: true, ..RuleFlags::default() };
        assert_eq!(classify(&scene, Action::Default, flags), StateClass::RuleViolation);

        // Nothing at all.
        assert_eq!(classify(&scene, Action::Default, RuleFlags::default()), StateClass::Nominal);
    }

    #[test]
    fn collision_reward_is_exactly_the_weighted_penalty() {
        let mut scene = highway_scene();
        // Ego at its desired speed; that must not mitigate the penalty.
        scene.ego_mut().v = 25.0;
        let params = RewardParams { theta_v: 25.0, ..RewardParams::default() };
        let r = compute_reward(StateClass::Collision, &scene, Action::Default, Action::Default, &params);
        assert_eq!(r, -1.0);
    }

    #[test]
    fn nominal_rewards_follow_the_velocity_shape() {
        let mut scene = highway_scene();
        scene.ego_mut().v = 25.0;
        let params = RewardParams { theta_v: 25.0, ..RewardParams::default() };
        let r = compute_reward(StateClass::Nominal, &scene, Action::Default, Action::Default, &params);
        assert_eq!(r, 1.0, "velocity term peaks at the desired speed");

        let r = compute_reward(
            StateClass::Nominal,
            &scene,
            Action::LaneChangeLeft,
            Action::Default,
            &params,
        );
        assert!((r - 0.95).abs() < 1e-12, "lane change at desired speed: 1.0 - 0.05");
    }

    #[test]
    fn velocity_term_peaks_at_theta_v_and_decreases() {
        let params = RewardParams { theta_v: 25.0, ..RewardParams::default() };
        let peak = velocity_reward(&params, 25.0);
        assert_eq!(peak, 1.0);
        let mut last = peak;
        for divergence in [1.0, 3.0, 6.0, 9.0, 12.0, 16.0, 19.0] {
            let r = velocity_reward(&params, 25.0 - divergence);
            assert!(r < last, "strictly decreasing in the divergence");
            assert_eq!(r, velocity_reward(&params, 25.0 + divergence), "symmetric");
            last = r;
        }
        assert_eq!(velocity_reward(&params, 25.0 - 10.0), 0.0, "zero at the cap");
        assert_eq!(velocity_reward(&params, 25.0 - 25.0), -1.0, "clamped at the negative peak");
    }

    #[test]
    fn priority_masking_ignores_lower_terms() {
        let scene = highway_scene();
        let expected = 2.0 * -1.0;
        for theta_p in [0.0, 1.0, 5.0] {
            for theta_k in [0.0, 2.0] {
                for theta_a in [0.0, 3.0] {
                    for theta_v in [12.0, 25.0, 31.0] {
                        let params = RewardParams {
                            theta_t: 2.0,
                            theta_p,
                            theta_k,
                            theta_a,
                            theta_v,
                            ..RewardParams::default()
                        };
                        let r = compute_reward(
                            StateClass::Collision,
                            &scene,
                            Action::Accelerate,
                            Action::Default,
                            &params,
                        );
                        assert_eq!(r, expected);
                    }
                }
            }
        }
    }

    #[test]
    fn reward_is_monotone_in_penalty_weights() {
        // Rule class: increasing any triggered weight cannot increase r.
        let mut scene = highway_scene();
        scene.ego_mut().s = 200.0;
        scene.ego_mut().lane = 1;
        scene.ego_mut().v = 20.0;
        push_vehicle(&mut scene, 1, 1, 220.0, 20.0); // safe-distance violation
        let flags = check_rules(&scene, &RewardParams::default());
        assert!(flags.safe_distance && flags.keep_right);

        let mut previous = f64::INFINITY;
        for w in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let params = RewardParams { theta_s: w, theta_k: w, ..RewardParams::default() };
            let r = compute_reward(
                StateClass::RuleViolation,
                &scene,
                Action::Default,
                Action::Default,
                &params,
            );
            assert!(r <= previous);
            previous = r;
        }
    }

    #[test]
    fn scaling_nominal_magnitudes_preserves_greedy_ordering() {
        let mut scene = highway_scene();
        scene.ego_mut().s = 300.0;
        scene.ego_mut().lane = 0;
        scene.ego_mut().v = 22.0;
        let base = RewardParams { theta_v: 28.0, ..RewardParams::default() };

        let one_step_rewards = |params: &RewardParams| -> Vec<f64> {
            Action::ALL
                .iter()
                .map(|&a| {
                    let mut probe = scene.clone();
                    probe.step(a, 1.0);
                    let flags = check_rules(&probe, params);
                    let class = classify(&probe, a, flags);
                    compute_reward(class, &probe, a, Action::Default, params)
                })
                .collect()
        };

        let order = |rs: &[f64]| {
            let mut idx: Vec<usize> = (0..rs.len()).collect();
            idx.sort_by(|&a, &b| rs[b].partial_cmp(&rs[a]).unwrap().then(a.cmp(&b)));
            idx
        };

        let baseline = one_step_rewards(&base);
        for scale in [0.1, 2.0, 10.0] {
            let mut scaled = base;
            scaled.magnitudes.velocity_reward_max *= scale;
            scaled.magnitudes.action_penalty *= scale;
            let rs = one_step_rewards(&scaled);
            assert_eq!(order(&baseline), order(&rs), "scale {scale} changed the ordering");
        }
    }
}
