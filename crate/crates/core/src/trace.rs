//! JSON-lines trace files.
//!
//! An evaluation run emits one trace file: a `meta` line (scenario, seed,
//! desired speed, encoder fingerprint), one `step` line per decision
//! interval with the full vehicle state, and a closing `summary` line with
//! the per-run aggregates. Metrics are pure functions of the step records,
//! so a trace can always be replayed and checked against its own summary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::{RewardBreakdown, RuleFlags};
use crate::sim::{Action, CollisionEvent, ScenarioId, TrafficScene};
use crate::state::EncoderConfig;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt trace at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("trace integrity check failed: {0}")]
    Integrity(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Meta(TraceMeta),
    Step(Box<StepRecord>),
    Summary(RunSummary),
}

/// Identifies the run and the encoder geometry the trace was produced with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub scenario: ScenarioId,
    pub run_index: u32,
    pub seed: u64,
    pub theta_v: f64,
    /// Ego start position; anchors the distance accounting.
    pub start_s: f64,
    pub scope_lateral: usize,
    pub scope_ahead: usize,
    pub scope_behind: usize,
    pub sensor_range: f64,
    pub input_dim: usize,
}

impl TraceMeta {
    pub fn new(
        scenario: ScenarioId,
        run_index: u32,
        seed: u64,
        theta_v: f64,
        start_s: f64,
        encoder: &EncoderConfig,
    ) -> Self {
        Self {
            scenario,
            run_index,
            seed,
            theta_v,
            start_s,
            scope_lateral: encoder.scope.lateral,
            scope_ahead: encoder.scope.ahead,
            scope_behind: encoder.scope.behind,
            sensor_range: encoder.sensor_range,
            input_dim: encoder.input_dim(),
        }
    }

    pub fn matches_encoder(&self, encoder: &EncoderConfig) -> bool {
        self.scope_lateral == encoder.scope.lateral
            && self.scope_ahead == encoder.scope.ahead
            && self.scope_behind == encoder.scope.behind
            && self.sensor_range == encoder.sensor_range
            && self.input_dim == encoder.input_dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u64,
    pub lane: i64,
    pub s: f64,
    pub v: f64,
    pub d: f64,
    pub phi: f64,
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub time_s: f64,
    pub action: Action,
    pub ego: VehicleRecord,
    pub vehicles: Vec<VehicleRecord>,
    pub events: Vec<CollisionEvent>,
    pub flags: RuleFlags,
    pub reward: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reward_breakdown: Option<RewardBreakdown>,
    /// Flattened state tensor, included when state tracing is enabled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub state: Option<Vec<f64>>,
}

/// Per-run aggregates; everything downstream reports derives from these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: u64,
    /// Ego displacement over the run (m).
    pub distance_m: f64,
    pub collided: bool,
    /// Steps classified as rule violations.
    pub rule_violation_steps: u64,
    /// Ego occupancy per lane index, counted after each step.
    pub lane_steps: Vec<u64>,
    pub mean_speed_mps: f64,
    pub total_reward: f64,
}

pub fn vehicle_record(scene: &TrafficScene, id: u64) -> Option<VehicleRecord> {
    scene.vehicles.iter().find(|v| v.id == id).map(|v| VehicleRecord {
        id: v.id,
        lane: v.lane,
        s: v.s,
        v: v.v,
        d: v.d,
        phi: v.phi,
        length: v.length,
    })
}

pub fn step_record(
    scene: &TrafficScene,
    step: u64,
    dt: f64,
    action: Action,
    events: &[CollisionEvent],
    flags: RuleFlags,
    reward: f64,
) -> StepRecord {
    let ego = scene.ego();
    StepRecord {
        step,
        time_s: scene.time_step as f64 * dt,
        action,
        ego: vehicle_record(scene, ego.id).expect("ego present"),
        vehicles: scene
            .vehicles
            .iter()
            .filter(|v| !v.is_ego)
            .map(|v| vehicle_record(scene, v.id).expect("vehicle present"))
            .collect(),
        events: events.to_vec(),
        flags,
        reward,
        reward_breakdown: None,
        state: None,
    }
}

/// Streaming JSONL writer.
pub struct TraceWriter {
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, TraceError> {
        Ok(Self { out: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, record: &TraceRecord) -> Result<(), TraceError> {
        let line = serde_json::to_string(record)
            .map_err(|e| TraceError::Corrupt { line: 0, message: e.to_string() })?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), TraceError> {
        self.out.flush()?;
        Ok(())
    }
}

/// Read a whole trace file; fails on any corrupt line.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line)
            .map_err(|e| TraceError::Corrupt { line: i + 1, message: e.to_string() })?;
        records.push(record);
    }
    Ok(records)
}

/// Recompute a run summary from step records. `lanes` sizes the occupancy
/// vector; `start_s` is the ego position before the first step (from the
/// meta record).
pub fn summarize_steps(
    steps: &[&StepRecord],
    lanes: usize,
    start_s: f64,
) -> Result<RunSummary, TraceError> {
    if steps.is_empty() {
        return Err(TraceError::Integrity("trace holds no step records".into()));
    }
    let mut lane_steps = vec![0u64; lanes];
    let mut rule_violation_steps = 0;
    let mut collided = false;
    let mut speed_sum = 0.0;
    let mut total_reward = 0.0;
    let mut distance = 0.0;
    let mut prev_s = start_s;
    for record in steps {
        let lane = record.ego.lane;
        if lane >= 0 && (lane as usize) < lane_steps.len() {
            lane_steps[lane as usize] += 1;
        }
        if record.flags.any() && record.events.is_empty() {
            rule_violation_steps += 1;
        }
        if !record.events.is_empty() {
            collided = true;
        }
        speed_sum += record.ego.v;
        total_reward += record.reward;
        distance += record.ego.s - prev_s;
        prev_s = record.ego.s;
    }
    Ok(RunSummary {
        steps: steps.len() as u64,
        distance_m: distance,
        collided,
        rule_violation_steps,
        lane_steps,
        mean_speed_mps: speed_sum / steps.len() as f64,
        total_reward,
    })
}
