//! Scenario construction: road geometry, initial traffic and the ego.
//!
//! Two scenarios are provided. `highway` is a straight three-lane course;
//! `merging` is a two-lane highway with an acceleration lane (index 0) that
//! ends partway down the course, which the ego departs on and has to leave.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{LaneSegment, LaneType, ScenarioId, TrafficScene, Vehicle};
use crate::rng::{stream_rng, STREAM_TRAFFIC};

/// Vehicle-dynamics and integration parameters shared by both scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    /// Commanded acceleration magnitude of accelerate/decelerate (m/s^2).
    pub a_cmd: f64,
    /// Hard speed ceiling for every vehicle (m/s).
    pub v_max: f64,
    /// Lane width (m); the encoder scales lateral offsets by half of it.
    pub lane_width: f64,
    /// Internal integration sub-steps per decision interval for background
    /// traffic (the ego integrates in closed form).
    pub sub_steps: u32,
    pub idm: super::idm::IdmParams,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            a_cmd: 2.0,
            v_max: 40.0,
            lane_width: 3.5,
            sub_steps: 5,
            idm: super::idm::IdmParams::default(),
        }
    }
}

/// Per-scenario geometry, traffic and start-randomization parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Number of normal lanes (the merging ramp comes on top of these).
    pub lanes: u32,
    pub course_length: f64,
    /// End of the acceleration lane (merging only; measured from s = 0).
    pub ramp_end: f64,
    /// Initial background traffic per lane (vehicles per km).
    pub density: f64,
    /// Ongoing background arrivals per lane at the course entry (vehicles/s).
    pub arrival_rate: f64,
    /// Desired-speed range for background drivers (m/s).
    pub speed_range: (f64, f64),
    /// Range the desired-velocity parameter theta_v is sampled from (m/s).
    pub theta_v_range: (f64, f64),
    /// Ego start-speed randomization range (m/s).
    pub start_speed_range: (f64, f64),
    /// Maximum randomized departure delay (whole decision intervals).
    pub max_start_delay_steps: u32,
    pub vehicle_length: f64,
    /// Minimum bumper-to-bumper gap enforced when placing traffic (m).
    pub min_spawn_gap: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        // Highway defaults; `merging_default` adjusts the scenario-specific
        // fields.
        Self {
            lanes: 3,
            course_length: 1000.0,
            ramp_end: 0.0,
            density: 6.0,
            arrival_rate: 0.06,
            speed_range: (22.2, 31.9),
            theta_v_range: (22.2, 31.9),
            start_speed_range: (12.0, 31.9),
            max_start_delay_steps: 20,
            vehicle_length: 4.5,
            min_spawn_gap: 10.0,
        }
    }
}

impl ScenarioConfig {
    pub fn highway_default() -> Self {
        Self::default()
    }

    pub fn merging_default() -> Self {
        Self {
            lanes: 2,
            course_length: 600.0,
            ramp_end: 300.0,
            density: 5.0,
            arrival_rate: 0.05,
            speed_range: (11.1, 22.2),
            theta_v_range: (11.1, 22.2),
            start_speed_range: (8.0, 22.2),
            ..Self::default()
        }
    }

    /// Lanes background traffic may occupy. The acceleration lane is left to
    /// the ego.
    pub(crate) fn spawnable_lanes(&self, scenario: ScenarioId) -> Vec<i64> {
        match scenario {
            ScenarioId::Highway => (0..self.lanes as i64).collect(),
            ScenarioId::Merging => (1..=self.lanes as i64).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), BuildError> {
        if self.lanes == 0 {
            return Err(BuildError::InvalidConfig("lanes must be positive".into()));
        }
        if self.course_length <= 0.0 {
            return Err(BuildError::InvalidConfig("course_length must be positive".into()));
        }
        if self.density < 0.0 || self.arrival_rate < 0.0 {
            return Err(BuildError::InvalidConfig("traffic density/arrival rate must be nonnegative".into()));
        }
        if self.vehicle_length <= 0.0 {
            return Err(BuildError::InvalidConfig("vehicle_length must be positive".into()));
        }
        for (lo, hi, name) in [
            (self.speed_range.0, self.speed_range.1, "speed_range"),
            (self.theta_v_range.0, self.theta_v_range.1, "theta_v_range"),
            (self.start_speed_range.0, self.start_speed_range.1, "start_speed_range"),
        ] {
            if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi < lo {
                return Err(BuildError::InvalidConfig(format!("{name} must be a nonnegative ordered range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("could not place initial traffic without overlap at density {density} veh/km/lane")]
    PlacementFailed { density: f64 },
}

/// Build an initialized scene: road geometry, the ego at its scenario entry
/// and background traffic placed without overlap. The seed fixes every
/// random choice the scene will ever make.
pub fn build_scenario(
    scenario: ScenarioId,
    config: &ScenarioConfig,
    params: &SimParams,
    seed: u64,
) -> Result<TrafficScene, BuildError> {
    config.validate()?;
    if scenario == ScenarioId::Merging {
        if config.ramp_end <= 0.0 || config.ramp_end >= config.course_length {
            return Err(BuildError::InvalidConfig(
                "merging requires 0 < ramp_end < course_length".into(),
            ));
        }
    }

    let mut lanes = Vec::new();
    let mut next_segment = 0u32;
    match scenario {
        ScenarioId::Highway => {
            for k in 0..config.lanes as i64 {
                lanes.push(LaneSegment {
                    id: next_segment,
                    index: k,
                    lane_type: LaneType::Normal,
                    start_s: 0.0,
                    end_s: config.course_length,
                });
                next_segment += 1;
            }
        }
        ScenarioId::Merging => {
            lanes.push(LaneSegment {
                id: next_segment,
                index: 0,
                lane_type: LaneType::Acceleration,
                start_s: 0.0,
                end_s: config.ramp_end,
            });
            next_segment += 1;
            for k in 1..=config.lanes as i64 {
                lanes.push(LaneSegment {
                    id: next_segment,
                    index: k,
                    lane_type: LaneType::Normal,
                    start_s: 0.0,
                    end_s: config.course_length,
                });
                next_segment += 1;
            }
        }
    }

    let mut rng = stream_rng(seed, STREAM_TRAFFIC);

    let (ego_lane, ego_s) = match scenario {
        ScenarioId::Highway => (0, 10.0),
        ScenarioId::Merging => (0, 5.0),
    };
    let ego_v = 0.5 * (config.start_speed_range.0 + config.start_speed_range.1);
    let mut scene = TrafficScene {
        scenario,
        lanes,
        vehicles: vec![Vehicle {
            id: 0,
            s: ego_s,
            v: ego_v,
            lane: ego_lane,
            d: 0.0,
            phi: 0.0,
            length: config.vehicle_length,
            is_ego: true,
            desired_speed: ego_v,
        }],
        time_step: 0,
        course_length: config.course_length,
        ego_entered_ramp: false,
        params: *params,
        scenario_config: config.clone(),
        rng: ChaCha8Rng::seed_from_u64(seed),
        next_vehicle_id: 1,
    };

    // Initial fill: uniform placement with minimum-gap rejection.
    let margin = config.vehicle_length;
    let (speed_lo, speed_hi) = config.speed_range;
    for lane in config.spawnable_lanes(scenario) {
        let target = (config.density * config.course_length / 1000.0).round() as usize;
        let mut placed = 0usize;
        let mut attempts = 0usize;
        let attempt_budget = 50 * target.max(1);
        while placed < target {
            attempts += 1;
            if attempts > attempt_budget {
                return Err(BuildError::PlacementFailed { density: config.density });
            }
            let s = rng.gen_range(margin..=(config.course_length - margin));
            let clear = scene.vehicles.iter().all(|v| {
                v.lane != lane || (v.s - s).abs() >= v.length.max(config.vehicle_length) + config.min_spawn_gap
            });
            if !clear {
                continue;
            }
            let speed = rng.gen_range(speed_lo..=speed_hi);
            let id = scene.next_vehicle_id;
            scene.next_vehicle_id += 1;
            scene.vehicles.push(Vehicle {
                id,
                s,
                v: speed,
                lane,
                d: 0.0,
                phi: 0.0,
                length: config.vehicle_length,
                is_ego: false,
                desired_speed: speed,
            });
            placed += 1;
        }
    }

    scene.rng = rng;
    Ok(scene)
}
