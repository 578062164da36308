//! Intelligent Driver Model car-following law for background traffic.

use serde::{Deserialize, Serialize};

/// IDM constants shared by all background vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdmParams {
    /// Maximum acceleration a (m/s^2).
    pub max_accel: f64,
    /// Comfortable braking deceleration b (m/s^2).
    pub comfort_brake: f64,
    /// Desired time headway T (s).
    pub headway: f64,
    /// Jam distance s0 (m).
    pub min_gap: f64,
    /// Physical braking limit applied on top of the model output (m/s^2).
    pub hard_brake: f64,
    /// Leaders further ahead than this are ignored (m).
    pub horizon: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            max_accel: 1.5,
            comfort_brake: 2.0,
            headway: 1.5,
            min_gap: 2.0,
            hard_brake: 8.0,
            horizon: 150.0,
        }
    }
}

/// IDM acceleration for a vehicle at speed `v` with desired speed `v0`.
///
/// `leader` carries the bumper-to-bumper gap and the leader speed; `None`
/// means free road. The result is clamped to `[-hard_brake, max_accel]`.
pub fn idm_accel(params: &IdmParams, v: f64, v0: f64, leader: Option<(f64, f64)>) -> f64 {
    // A zero desired speed means a parked vehicle.
    if v0 <= 0.0 {
        return if v > 0.0 { -params.hard_brake } else { 0.0 };
    }
    let free = 1.0 - (v / v0).powi(4);
    let interaction = match leader {
        Some((gap, v_leader)) => {
            let closing = v - v_leader;
            let desired_gap = params.min_gap
                + v * params.headway
                + v * closing / (2.0 * (params.max_accel * params.comfort_brake).sqrt());
            // A non-positive gap means the pair already overlaps; emergency brake.
            if gap <= 0.0 {
                return -params.hard_brake;
            }
            (desired_gap.max(0.0) / gap).powi(2)
        }
        None => 0.0,
    };
    (params.max_accel * (free - interaction)).clamp(-params.hard_brake, params.max_accel)
}
