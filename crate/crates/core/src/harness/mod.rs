//! Episode and training-loop orchestration.
//!
//! Episode semantics: a collision ends the episode with a terminal
//! transition but the simulation keeps running in place (position and
//! velocity preserved, desired speed kept); hitting the per-episode step cap
//! or the course end stores a non-terminal final transition and resets the
//! simulation with a freshly randomized start. When several scenarios are
//! configured they alternate at every reset.
//!
//! Training metrics are windowed (one CSV row per full window); checkpoints
//! are cut at episode boundaries whenever the step counter crossed the
//! checkpoint interval, plus a final checkpoint at the end of the budget.

pub mod snapshot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{DqnAgent, Transition};
use crate::config::{ConfigError, RunConfig};
use crate::mlp::checkpoint::{save_checkpoint, CheckpointError};
use crate::mlp::{MlpError, NetworkParams};
use crate::reward::{check_rules, classify_events, compute_reward, RewardParams, StateClass};
use crate::rng::{stream_rng, STREAM_START, STREAM_TRAFFIC};
use crate::sim::{build_scenario, Action, BuildError, ScenarioConfig, ScenarioId, TrafficScene};
use crate::state::encode_scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Step cap per episode; reaching it resets the simulation.
    pub max_episode_steps: u64,
    /// Seconds of simulated time per decision (one action per interval).
    pub decision_interval: f64,
    /// Checkpoint every this many environment steps (plus a final one).
    pub checkpoint_interval: u64,
    /// Metrics window length in environment steps.
    pub metrics_window: u64,
    /// Write a resumable run-state snapshot at the end of training.
    pub save_run_state: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            max_episode_steps: 200,
            decision_interval: 1.0,
            checkpoint_interval: 100_000,
            metrics_window: 10_000,
            save_run_state: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Network(#[from] MlpError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad run state snapshot: {0}")]
    Snapshot(String),
}

/// How an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeEnd {
    /// Terminal state; the simulation continues in place.
    Collision,
    /// Step cap reached; the simulation is reset.
    Timeout,
    /// The ego left the course; the simulation is reset.
    CourseEnd,
    /// The global step budget ran out mid-episode.
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub scenario: ScenarioId,
    pub steps: u64,
    pub end: EpisodeEnd,
    pub terminal: bool,
    pub reward_sum: f64,
    pub theta_v: f64,
}

/// One training-metrics CSV row (full windows only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episodes: u64,
    /// Collision steps per environment step in the window.
    pub collision_rate_window: f64,
    /// Rule-violation steps per environment step in the window.
    pub rule_violation_ratio_window: f64,
    pub mean_reward_window: f64,
    pub epsilon: f64,
}

pub const METRICS_HEADER: &str =
    "step,episodes,collision_rate_window,rule_violation_ratio_window,mean_reward_window,epsilon";

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.episodes,
            self.collision_rate_window,
            self.rule_violation_ratio_window,
            self.mean_reward_window,
            self.epsilon
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WindowAccumulator {
    pub steps: u64,
    pub collision_steps: u64,
    pub rule_steps: u64,
    pub reward_sum: f64,
}

/// Randomize the episode start in place: departure delay (background-only
/// pre-roll), start lane (the ramp on merging), start speed, and the desired
/// speed theta_v, which is returned. Background vehicles too close to the
/// relocated ego are cleared so no episode begins inside a collision.
pub fn randomize_start(
    scene: &mut TrafficScene,
    rng: &mut ChaCha8Rng,
    cfg: &ScenarioConfig,
    dt: f64,
) -> f64 {
    let delay = rng.gen_range(0..=cfg.max_start_delay_steps);
    for _ in 0..delay {
        scene.warmup_step(dt);
    }
    let lane = match scene.scenario {
        ScenarioId::Highway => rng.gen_range(0..cfg.lanes as i64),
        ScenarioId::Merging => 0,
    };
    let speed = rng.gen_range(cfg.start_speed_range.0..=cfg.start_speed_range.1);
    let theta_v = rng.gen_range(cfg.theta_v_range.0..=cfg.theta_v_range.1);

    let entry_s = match scene.scenario {
        ScenarioId::Highway => 10.0,
        ScenarioId::Merging => 5.0,
    };
    {
        let ego = scene.ego_mut();
        ego.lane = lane;
        ego.s = entry_s;
        ego.v = speed;
    }
    let bubble = cfg.min_spawn_gap + cfg.vehicle_length;
    let (ego_lane, ego_s) = {
        let ego = scene.ego();
        (ego.lane, ego.s)
    };
    scene.vehicles.retain(|v| v.is_ego || v.lane != ego_lane || (v.s - ego_s).abs() > bubble);
    theta_v
}

/// Mutable training-run state: scene, agent, counters, metrics and the
/// random streams that drive start randomization and traffic seeding.
pub struct RunState {
    pub config: RunConfig,
    pub scene: TrafficScene,
    pub agent: DqnAgent,
    pub reward_params: RewardParams,
    pub global_step: u64,
    pub episodes: u64,
    /// Index into `config.run.scenarios` of the scene currently running.
    pub scenario_cursor: usize,
    pub prev_action: Action,
    pub metrics_rows: Vec<MetricsRow>,
    pub window: WindowAccumulator,
    pub(crate) start_rng: ChaCha8Rng,
    pub(crate) traffic_seed_rng: ChaCha8Rng,
}

impl RunState {
    pub fn new(config: RunConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let input_dim = config.encoder.input_dim();
        let agent = DqnAgent::new(input_dim, config.agent, config.run.seed)?;
        Self::with_agent(config, agent)
    }

    /// Wrap a prepared agent (tests use small networks here).
    pub fn with_agent(config: RunConfig, agent: DqnAgent) -> Result<Self, TrainError> {
        config.validate()?;
        let mut state = Self {
            reward_params: config.reward,
            scene: placeholder_scene(&config)?,
            agent,
            global_step: 0,
            episodes: 0,
            scenario_cursor: 0,
            prev_action: Action::Default,
            metrics_rows: Vec::new(),
            window: WindowAccumulator::default(),
            start_rng: stream_rng(config.run.seed, STREAM_START),
            traffic_seed_rng: stream_rng(config.run.seed, STREAM_TRAFFIC),
            config,
        };
        state.reset_simulation(0)?;
        Ok(state)
    }

    pub fn active_scenario(&self) -> ScenarioId {
        self.config.run.scenarios[self.scenario_cursor % self.config.run.scenarios.len()]
    }

    pub fn theta_v(&self) -> f64 {
        self.reward_params.theta_v
    }

    /// Build a fresh scene for the scenario at `cursor` and randomize the
    /// start (redrawing theta_v).
    fn reset_simulation(&mut self, cursor: usize) -> Result<(), TrainError> {
        self.scenario_cursor = cursor % self.config.run.scenarios.len();
        let scenario = self.config.run.scenarios[self.scenario_cursor];
        let scen_cfg = self.config.scenario_config(scenario).clone();
        let seed = self.traffic_seed_rng.gen();
        let mut scene = build_scenario(scenario, &scen_cfg, &self.config.sim, seed)?;
        let theta_v = randomize_start(
            &mut scene,
            &mut self.start_rng,
            &scen_cfg,
            self.config.harness.decision_interval,
        );
        self.scene = scene;
        self.reward_params.theta_v = theta_v;
        self.prev_action = Action::Default;
        Ok(())
    }

    fn flush_window_row(&mut self) {
        let w = self.window;
        if w.steps == 0 {
            return;
        }
        self.metrics_rows.push(MetricsRow {
            step: self.global_step,
            episodes: self.episodes,
            collision_rate_window: w.collision_steps as f64 / w.steps as f64,
            rule_violation_ratio_window: w.rule_steps as f64 / w.steps as f64,
            mean_reward_window: w.reward_sum / w.steps as f64,
            epsilon: self.agent.epsilon_at(self.global_step),
        });
        self.window = WindowAccumulator::default();
    }
}

fn placeholder_scene(config: &RunConfig) -> Result<TrafficScene, TrainError> {
    let scenario = config.run.scenarios[0];
    let mut cfg = config.scenario_config(scenario).clone();
    cfg.density = 0.0;
    cfg.arrival_rate = 0.0;
    Ok(build_scenario(scenario, &cfg, &config.sim, 0)?)
}

/// Run one episode: encode, act, step, reward, store, train-tick, until a
/// terminal collision (no reset), the step cap or course end (reset), or
/// budget exhaustion.
pub fn run_episode(state: &mut RunState) -> Result<EpisodeSummary, TrainError> {
    let encoder = state.config.encoder.clone();
    let harness = state.config.harness;
    let budget = state.config.run.budget;
    let scenario = state.scene.scenario;
    let theta_v = state.reward_params.theta_v;
    let metrics_window = harness.metrics_window;

    let mut steps_in_episode = 0u64;
    let mut reward_sum = 0.0;

    loop {
        if state.global_step >= budget {
            return Ok(EpisodeSummary {
                scenario,
                steps: steps_in_episode,
                end: EpisodeEnd::BudgetExhausted,
                terminal: false,
                reward_sum,
                theta_v,
            });
        }

        let s = encode_scene(&state.scene, &encoder, theta_v).flatten();
        let action_index = state.agent.act(&s, state.global_step);
        let action = Action::from_index(action_index).expect("network output width is 5");
        let events = state.scene.step(action, harness.decision_interval);
        let flags = check_rules(&state.scene, &state.reward_params);
        let class = classify_events(&events, flags);
        let reward =
            compute_reward(class, &state.scene, action, state.prev_action, &state.reward_params);
        let s_next = encode_scene(&state.scene, &encoder, theta_v).flatten();
        let terminal = events.collided();

        state.agent.observe(Transition {
            state: s.iter().map(|&v| v as f32).collect(),
            action: action_index,
            reward: reward as f32,
            next_state: s_next.iter().map(|&v| v as f32).collect(),
            terminal,
        });
        state.global_step += 1;
        state.agent.train_tick(state.global_step);
        state.prev_action = action;

        steps_in_episode += 1;
        reward_sum += reward;
        state.window.steps += 1;
        state.window.reward_sum += reward;
        if terminal {
            state.window.collision_steps += 1;
        }
        if class == StateClass::RuleViolation {
            state.window.rule_steps += 1;
        }
        if state.global_step % metrics_window == 0 {
            state.flush_window_row();
        }

        if terminal {
            state.episodes += 1;
            state.scene.resolve_collision_aftermath(&events);
            return Ok(EpisodeSummary {
                scenario,
                steps: steps_in_episode,
                end: EpisodeEnd::Collision,
                terminal: true,
                reward_sum,
                theta_v,
            });
        }
        if steps_in_episode >= harness.max_episode_steps || state.scene.ego_beyond_course() {
            let end = if steps_in_episode >= harness.max_episode_steps {
                EpisodeEnd::Timeout
            } else {
                EpisodeEnd::CourseEnd
            };
            state.episodes += 1;
            let next_cursor = state.scenario_cursor + 1;
            state.reset_simulation(next_cursor)?;
            return Ok(EpisodeSummary {
                scenario,
                steps: steps_in_episode,
                end,
                terminal: false,
                reward_sum,
                theta_v,
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps: u64,
    pub episodes: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub run_state_path: Option<PathBuf>,
}

/// Train from scratch per the configuration, writing checkpoints, the
/// metrics CSV and (optionally) a resumable run-state snapshot to `out_dir`.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    let state = RunState::new(config.clone())?;
    train_loop(state, out_dir)
}

/// Continue a run from a snapshot; `new_budget` extends or shortens the
/// embedded budget.
pub fn resume(
    snapshot_path: &Path,
    out_dir: &Path,
    new_budget: Option<u64>,
) -> Result<TrainOutcome, TrainError> {
    let mut state = snapshot::load_run_state(snapshot_path)?;
    if let Some(budget) = new_budget {
        state.config.run.budget = budget;
    }
    train_loop(state, out_dir)
}

fn train_loop(mut state: RunState, out_dir: &Path) -> Result<TrainOutcome, TrainError> {
    fs::create_dir_all(out_dir)?;
    let checkpoints_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&checkpoints_dir)?;

    let budget = state.config.run.budget;
    let interval = state.config.harness.checkpoint_interval;
    let mut last_checkpoint_step = state.global_step;

    while state.global_step < budget {
        run_episode(&mut state)?;
        if state.global_step / interval > last_checkpoint_step / interval {
            let dir = checkpoints_dir.join(format!("step_{:09}", state.global_step));
            save_checkpoint(&dir, &state.agent.online, state.global_step)?;
            last_checkpoint_step = state.global_step;
        }
    }

    let final_checkpoint = checkpoints_dir.join("final");
    save_checkpoint(&final_checkpoint, &state.agent.online, state.global_step)?;

    let metrics_path = out_dir.join("metrics.csv");
    write_metrics_csv(&metrics_path, &state.metrics_rows)?;

    let run_state_path = if state.config.harness.save_run_state {
        let path = out_dir.join("run_state.bin");
        snapshot::save_run_state(&path, &state)?;
        Some(path)
    } else {
        None
    };

    Ok(TrainOutcome {
        steps: state.global_step,
        episodes: state.episodes,
        final_checkpoint,
        metrics_path,
        run_state_path,
    })
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<(), std::io::Error> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv_line());
        out.push('\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Greedy-policy network loader shared by evaluation entry points.
pub fn load_policy(checkpoint_dir: &Path) -> Result<(NetworkParams, u64), CheckpointError> {
    crate::mlp::checkpoint::load_checkpoint(checkpoint_dir)
}
