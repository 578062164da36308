//! Post-training evaluation: the 100-run protocol, the five metrics,
//! fixed-desired-speed sweeps and report/trace emission.
//!
//! Evaluation runs are greedy (no exploration) and bounded by the course
//! end or a collision, not by the training episode cap; a hard step guard
//! protects against policies that stall. Every metric is a pure function of
//! the emitted trace files, so replaying a trace reproduces its report
//! exactly.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::harness::randomize_start;
use crate::mlp::{MlpError, NetworkParams, Scratch};
use crate::reward::{check_rules, classify_events, compute_reward, RewardParams, StateClass};
use crate::rng::{stream_rng, STREAM_EVAL, STREAM_START};
use crate::sim::{build_scenario, Action, BuildError, ScenarioId};
use crate::state::encode_scene;
use crate::trace::{
    read_trace, step_record, summarize_steps, RunSummary, StepRecord, TraceError, TraceMeta,
    TraceRecord, TraceWriter,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Independent runs per evaluation.
    pub n_runs: u32,
    /// Hard per-run step guard (course end or collision end runs earlier).
    pub max_steps_per_run: u64,
    /// Write per-run JSONL traces next to the report.
    pub write_traces: bool,
    /// Embed the flattened state tensor in every step record.
    pub trace_states: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n_runs: 100, max_steps_per_run: 2_000, write_traces: true, trace_states: false }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Network(#[from] MlpError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("evaluation io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint input width {checkpoint} does not match encoder input width {encoder}")]
    InputDimMismatch { checkpoint: usize, encoder: usize },
    #[error("report error: {0}")]
    Report(String),
}

/// Aggregate evaluation metrics over one run set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: ScenarioId,
    /// Fixed desired speed, or None when sampled per run.
    pub theta_v: Option<f64>,
    pub empty_road: bool,
    pub runs: u32,
    pub seed: u64,
    pub collision_rate_pct: f64,
    /// Mean distance travelled between collisions (km); total distance when
    /// `collision_free`.
    pub avg_distance_between_collisions_km: f64,
    pub collision_free: bool,
    /// Share of timesteps violating a traffic rule, pooled over runs (%).
    pub rule_violation_pct: f64,
    /// Share of timesteps per lane index, pooled over runs (%).
    pub lane_distribution_pct: Vec<f64>,
    /// Total distance over total driving time (m/s).
    pub avg_speed_mps: f64,
    pub total_distance_km: f64,
    pub total_steps: u64,
}

/// Build the aggregate report from per-run summaries.
pub fn aggregate_report(
    summaries: &[RunSummary],
    scenario: ScenarioId,
    theta_v: Option<f64>,
    empty_road: bool,
    seed: u64,
    dt: f64,
) -> Result<EvalReport, EvalError> {
    if summaries.is_empty() {
        return Err(EvalError::Report("no runs to aggregate".into()));
    }
    let runs = summaries.len() as u32;
    let collisions = summaries.iter().filter(|s| s.collided).count() as u32;
    let total_steps: u64 = summaries.iter().map(|s| s.steps).sum();
    let total_distance_m: f64 = summaries.iter().map(|s| s.distance_m).sum();
    let rule_steps: u64 = summaries.iter().map(|s| s.rule_violation_steps).sum();

    let lanes = summaries.iter().map(|s| s.lane_steps.len()).max().unwrap_or(0);
    let mut lane_steps = vec![0u64; lanes];
    for summary in summaries {
        for (lane, n) in summary.lane_steps.iter().enumerate() {
            lane_steps[lane] += n;
        }
    }
    let lane_distribution_pct: Vec<f64> =
        lane_steps.iter().map(|&n| 100.0 * n as f64 / total_steps as f64).collect();

    let total_km = total_distance_m / 1000.0;
    let (avg_distance_km, collision_free) = if collisions > 0 {
        (total_km / collisions as f64, false)
    } else {
        (total_km, true)
    };

    Ok(EvalReport {
        scenario,
        theta_v,
        empty_road,
        runs,
        seed,
        collision_rate_pct: 100.0 * collisions as f64 / runs as f64,
        avg_distance_between_collisions_km: avg_distance_km,
        collision_free,
        rule_violation_pct: 100.0 * rule_steps as f64 / total_steps as f64,
        lane_distribution_pct,
        avg_speed_mps: total_distance_m / (total_steps as f64 * dt),
        total_distance_km: total_km,
        total_steps,
    })
}

/// Share of timesteps per lane from a recorded run.
pub fn lane_distribution(summary: &RunSummary) -> Result<Vec<f64>, EvalError> {
    if summary.steps == 0 {
        return Err(EvalError::Report("empty trace: lane distribution undefined".into()));
    }
    Ok(summary
        .lane_steps
        .iter()
        .map(|&n| 100.0 * n as f64 / summary.steps as f64)
        .collect())
}

/// Evaluate a policy: `n_runs` independent greedy episodes on the scenario.
/// `theta_v = None` samples the desired speed per run from the scenario
/// range; `empty` clears all background traffic. Traces and reports go to
/// `out_dir` when given.
pub fn evaluate(
    policy: &NetworkParams,
    config: &RunConfig,
    scenario: ScenarioId,
    theta_v: Option<f64>,
    empty: bool,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<EvalReport, EvalError> {
    if policy.input_dim() != config.encoder.input_dim() {
        return Err(EvalError::InputDimMismatch {
            checkpoint: policy.input_dim(),
            encoder: config.encoder.input_dim(),
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }

    let mut scen_cfg = config.scenario_config(scenario).clone();
    if empty {
        scen_cfg.density = 0.0;
        scen_cfg.arrival_rate = 0.0;
    }
    let dt = config.harness.decision_interval;
    let lanes = lane_count(&scen_cfg, scenario);
    let mut eval_rng = stream_rng(seed, STREAM_EVAL);
    let mut scratch = Scratch::for_params(policy);
    let mut summaries = Vec::with_capacity(config.eval.n_runs as usize);

    for run_index in 0..config.eval.n_runs {
        let run_seed: u64 = eval_rng.gen();
        let mut scene = build_scenario(scenario, &scen_cfg, &config.sim, run_seed)?;
        let mut start_rng = stream_rng(run_seed, STREAM_START);
        let sampled_theta = randomize_start(&mut scene, &mut start_rng, &scen_cfg, dt);
        let run_theta = theta_v.unwrap_or(sampled_theta);
        let mut reward_params = RewardParams { theta_v: run_theta, ..config.reward };
        reward_params.theta_v = run_theta;

        let meta =
            TraceMeta::new(scenario, run_index, run_seed, run_theta, scene.ego().s, &config.encoder);
        let mut records: Vec<StepRecord> = Vec::new();

        for step in 1..=config.eval.max_steps_per_run {
            let s = encode_scene(&scene, &config.encoder, run_theta).flatten();
            policy.forward_cached(&s, &mut scratch);
            let action_index = crate::agent::greedy_action(scratch.output());
            let action = Action::from_index(action_index).expect("five actions");
            let events = scene.step(action, dt);
            let flags = check_rules(&scene, &reward_params);
            let class = classify_events(&events, flags);
            let reward = compute_reward(class, &scene, action, Action::Default, &reward_params);
            debug_assert!(
                (class == StateClass::Collision) == events.collided(),
                "classification must mirror events"
            );

            let mut record =
                step_record(&scene, step, dt, action, &events.collisions, flags, reward);
            if config.eval.trace_states {
                record.state = Some(s);
            }
            records.push(record);

            // A run terminates on collision, unlike training episodes.
            if events.collided() {
                break;
            }
            if scene.ego_beyond_course() {
                break;
            }
        }

        let refs: Vec<&StepRecord> = records.iter().collect();
        let summary = summarize_steps(&refs, lanes, meta.start_s)?;

        if let Some(dir) = out_dir {
            if config.eval.write_traces {
                let path = dir.join(format!("run_{run_index:03}.jsonl"));
                let mut writer = TraceWriter::create(&path)?;
                writer.write(&TraceRecord::Meta(meta.clone()))?;
                for record in records {
                    writer.write(&TraceRecord::Step(Box::new(record)))?;
                }
                writer.write(&TraceRecord::Summary(summary.clone()))?;
                writer.finish()?;
            }
        }
        summaries.push(summary);
    }

    let report = aggregate_report(&summaries, scenario, theta_v, empty, seed, dt)?;
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
    }
    Ok(report)
}

fn lane_count(cfg: &crate::sim::ScenarioConfig, scenario: ScenarioId) -> usize {
    match scenario {
        ScenarioId::Highway => cfg.lanes as usize,
        ScenarioId::Merging => cfg.lanes as usize + 1,
    }
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(), EvalError> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| EvalError::Report(format!("report serialization failed: {e}")))?;
    fs::write(dir.join("report.json"), json)?;
    fs::write(dir.join("report.csv"), report_csv(report))?;
    Ok(())
}

fn report_csv(report: &EvalReport) -> String {
    let mut header = String::from(
        "scenario,theta_v,empty_road,runs,seed,collision_rate_pct,avg_distance_between_collisions_km,collision_free,rule_violation_pct,avg_speed_mps,total_distance_km,total_steps",
    );
    for lane in 0..report.lane_distribution_pct.len() {
        header.push_str(&format!(",lane{lane}_pct"));
    }
    let theta = report.theta_v.map(|t| t.to_string()).unwrap_or_else(|| "sampled".into());
    let mut row = format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        report.scenario,
        theta,
        report.empty_road,
        report.runs,
        report.seed,
        report.collision_rate_pct,
        report.avg_distance_between_collisions_km,
        report.collision_free,
        report.rule_violation_pct,
        report.avg_speed_mps,
        report.total_distance_km,
        report.total_steps
    );
    for pct in &report.lane_distribution_pct {
        row.push_str(&format!(",{pct}"));
    }
    format!("{header}\n{row}\n")
}

/// Verified replay of one run trace: recomputes the summary from the step
/// records and checks it against the embedded one.
pub fn replay_run(path: &Path, lanes: usize) -> Result<(TraceMeta, RunSummary), EvalError> {
    let records = read_trace(path)?;
    let mut meta = None;
    let mut steps = Vec::new();
    let mut embedded = None;
    for record in &records {
        match record {
            TraceRecord::Meta(m) => meta = Some(m.clone()),
            TraceRecord::Step(s) => steps.push(s.as_ref()),
            TraceRecord::Summary(s) => embedded = Some(s.clone()),
        }
    }
    let meta = meta.ok_or_else(|| {
        EvalError::Trace(TraceError::Integrity("trace has no meta record".into()))
    })?;
    let embedded = embedded.ok_or_else(|| {
        EvalError::Trace(TraceError::Integrity("trace has no summary record (truncated?)".into()))
    })?;
    let recomputed = summarize_steps(&steps, lanes.max(embedded.lane_steps.len()), meta.start_s)?;
    if recomputed != embedded {
        return Err(EvalError::Trace(TraceError::Integrity(format!(
            "recomputed summary disagrees with the embedded one:\n  recomputed: {recomputed:?}\n  embedded:   {embedded:?}"
        ))));
    }
    Ok((meta, recomputed))
}

/// Verified replay of a whole evaluation directory: every run trace is
/// replayed and the aggregate is checked against `report.json`.
pub fn replay_report(dir: &Path) -> Result<EvalReport, EvalError> {
    let report_path = dir.join("report.json");
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path)?)
        .map_err(|e| EvalError::Report(format!("cannot parse report.json: {e}")))?;

    let mut run_paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|e| e == "jsonl").unwrap_or(false)
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("run_"))
                    .unwrap_or(false)
        })
        .collect();
    run_paths.sort();
    if run_paths.len() != report.runs as usize {
        return Err(EvalError::Trace(TraceError::Integrity(format!(
            "report says {} runs but {} trace files are present",
            report.runs,
            run_paths.len()
        ))));
    }

    let lanes = report.lane_distribution_pct.len();
    let mut summaries = Vec::with_capacity(run_paths.len());
    let mut theta_first = None;
    for path in &run_paths {
        let (meta, summary) = replay_run(path, lanes)?;
        theta_first.get_or_insert(meta.theta_v);
        summaries.push(summary);
    }
    let recomputed = aggregate_report(
        &summaries,
        report.scenario,
        report.theta_v,
        report.empty_road,
        report.seed,
        // dt cancels only in time-based metrics; recover it from the report.
        recover_dt(&report, &summaries),
    )?;
    if recomputed != report {
        return Err(EvalError::Trace(TraceError::Integrity(
            "recomputed aggregate disagrees with report.json".into(),
        )));
    }
    Ok(report)
}

/// The decision interval used for `avg_speed = distance / (steps * dt)`;
/// reconstructed from the report so replay needs no config.
fn recover_dt(report: &EvalReport, summaries: &[RunSummary]) -> f64 {
    let total_distance_m: f64 = summaries.iter().map(|s| s.distance_m).sum();
    let total_steps: u64 = summaries.iter().map(|s| s.steps).sum();
    if report.avg_speed_mps > 0.0 && total_steps > 0 {
        total_distance_m / (report.avg_speed_mps * total_steps as f64)
    } else {
        1.0
    }
}

/// One row of a desired-speed sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta_v: f64,
    pub avg_speed_mps: f64,
    pub collision_rate_pct: f64,
}

/// Evaluate the policy across fixed desired speeds; one evaluation per
/// theta_v, with traffic unless `empty`.
pub fn speed_sweep(
    policy: &NetworkParams,
    config: &RunConfig,
    scenario: ScenarioId,
    theta_vs: &[f64],
    empty: bool,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>, EvalError> {
    let mut rows = Vec::with_capacity(theta_vs.len());
    for (i, &theta_v) in theta_vs.iter().enumerate() {
        let run_dir = out_dir.map(|d| d.join(format!("theta_{i:02}")));
        let report = evaluate(
            policy,
            config,
            scenario,
            Some(theta_v),
            empty,
            seed.wrapping_add(i as u64),
            run_dir.as_deref(),
        )?;
        rows.push(SweepRow {
            theta_v,
            avg_speed_mps: report.avg_speed_mps,
            collision_rate_pct: report.collision_rate_pct,
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("theta_v,avg_speed_mps,collision_rate_pct\n");
        for row in &rows {
            csv.push_str(&format!(
                "{},{},{}\n",
                row.theta_v, row.avg_speed_mps, row.collision_rate_pct
            ));
        }
        fs::write(dir.join("sweep.csv"), csv)?;
    }
    Ok(rows)
}
