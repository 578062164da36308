//! Run configuration: one structured TOML file drives every module.
//!
//! All eight sections must be present in a config file; every field inside a
//! section is optional and falls back to its default. `--set key=value`
//! overrides use dotted paths into the TOML tree (`agent.learning_rate=1e-4`,
//! `run.budget=1000`). `print_defaults` emits a complete, commented template.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::eval::EvalConfig;
use crate::harness::HarnessConfig;
use crate::reward::RewardParams;
use crate::sim::{ScenarioConfig, ScenarioId, SimParams};
use crate::state::EncoderConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("bad override '{0}': {1}")]
    Override(String, String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Scenarios to train on; episodes alternate through this list.
    pub scenarios: Vec<ScenarioId>,
    /// Master seed; all random streams derive from it.
    pub seed: u64,
    /// Environment-step budget for training.
    pub budget: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { scenarios: vec![ScenarioId::Highway], seed: 42, budget: 2_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSection {
    pub highway: ScenarioConfig,
    pub merging: ScenarioConfig,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            highway: ScenarioConfig::highway_default(),
            merging: ScenarioConfig::merging_default(),
        }
    }
}

// Each scenario subsection overlays its own defaults, so a partial
// `[scenario.merging]` table keeps the merging geometry for everything it
// does not mention.
impl<'de> Deserialize<'de> for ScenarioSection {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Default, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        struct Raw {
            highway: Option<toml::Value>,
            merging: Option<toml::Value>,
        }
        let raw = Raw::deserialize(deserializer)?;
        let highway = overlay_scenario(ScenarioConfig::highway_default(), raw.highway)
            .map_err(serde::de::Error::custom)?;
        let merging = overlay_scenario(ScenarioConfig::merging_default(), raw.merging)
            .map_err(serde::de::Error::custom)?;
        Ok(Self { highway, merging })
    }
}

fn overlay_scenario(
    base: ScenarioConfig,
    overlay: Option<toml::Value>,
) -> Result<ScenarioConfig, String> {
    let Some(overlay) = overlay else { return Ok(base) };
    let mut merged = toml::Value::try_from(&base).map_err(|e| e.to_string())?;
    let base_table = merged.as_table_mut().expect("scenario config serializes to a table");
    let over_table =
        overlay.as_table().ok_or_else(|| "scenario subsection must be a table".to_string())?;
    for (key, value) in over_table {
        if !base_table.contains_key(key) {
            return Err(format!("unknown field `{key}` in scenario subsection"));
        }
        base_table.insert(key.clone(), value.clone());
    }
    merged.try_into().map_err(|e: toml::de::Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Output directory for checkpoints, metrics, reports and traces.
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "run-out".into() }
    }
}

/// The full parameter surface of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub sim: SimParams,
    pub scenario: ScenarioSection,
    pub encoder: EncoderConfig,
    pub reward: RewardParams,
    pub agent: AgentConfig,
    pub harness: HarnessConfig,
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: RunSection::default(),
            sim: SimParams::default(),
            scenario: ScenarioSection {
                highway: ScenarioConfig::highway_default(),
                merging: ScenarioConfig::merging_default(),
            },
            encoder: EncoderConfig::default(),
            reward: RewardParams::default(),
            agent: AgentConfig::default(),
            harness: HarnessConfig::default(),
            eval: EvalConfig::default(),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn scenario_config(&self, id: ScenarioId) -> &ScenarioConfig {
        match id {
            ScenarioId::Highway => &self.scenario.highway,
            ScenarioId::Merging => &self.scenario.merging,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with_overrides(path, &[])
    }

    /// Parse a config file, apply `key=value` overrides, deserialize and
    /// validate.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Value = text.parse::<toml::Value>()?;
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let config: RunConfig = value.try_into()?;
        config.validate()?;
        Ok(config)
    }

    /// Resolved-config snapshot (valid as an input file).
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));

        if self.run.scenarios.is_empty() {
            return fail("run.scenarios must name at least one scenario".into());
        }
        if self.run.budget == 0 {
            return fail("run.budget must be positive".into());
        }
        for id in &self.run.scenarios {
            self.scenario_config(*id)
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("scenario.{id}: {e}")))?;
            let (lo, hi) = self.scenario_config(*id).theta_v_range;
            if hi > self.sim.v_max {
                return fail(format!(
                    "scenario.{id}.theta_v_range exceeds sim.v_max ({hi} > {})",
                    self.sim.v_max
                ));
            }
            if lo <= 0.0 {
                return fail(format!("scenario.{id}.theta_v_range must start above zero"));
            }
        }

        if self.sim.a_cmd <= 0.0 || self.sim.v_max <= 0.0 || self.sim.lane_width <= 0.0 {
            return fail("sim.a_cmd, sim.v_max and sim.lane_width must be positive".into());
        }
        if self.sim.sub_steps == 0 {
            return fail("sim.sub_steps must be at least 1".into());
        }

        let scope = &self.encoder.scope;
        if scope.ahead < 1 {
            return fail("encoder.scope.ahead must be at least 1".into());
        }
        if self.encoder.sensor_range <= 0.0 {
            return fail("encoder.sensor_range must be positive".into());
        }
        let norm = &self.encoder.norm;
        if norm.speed_scale <= 0.0
            || norm.half_lane_width <= 0.0
            || norm.phi_scale <= 0.0
            || norm.lane_end_cap <= 0.0
            || norm.lane_index_scale <= 0.0
        {
            return fail("encoder.norm scales must be positive".into());
        }
        if (-1.0..=1.0).contains(&norm.sentinel) {
            return fail("encoder.norm.sentinel must lie outside [-1, 1]".into());
        }

        let r = &self.reward;
        for (name, w) in [
            ("theta_t", r.theta_t),
            ("theta_p", r.theta_p),
            ("theta_n", r.theta_n),
            ("theta_s", r.theta_s),
            ("theta_k", r.theta_k),
            ("theta_a", r.theta_a),
        ] {
            if !w.is_finite() || w < 0.0 {
                return fail(format!("reward.{name} must be a nonnegative finite weight"));
            }
        }
        if r.magnitudes.omega_cap <= 0.0 {
            return fail("reward.magnitudes.omega_cap must be positive".into());
        }
        if r.thresholds.t_safe < 0.0 || r.thresholds.pass_right_window < 0.0 {
            return fail("reward.thresholds must be nonnegative".into());
        }

        let a = &self.agent;
        if a.replay_capacity == 0 || a.batch_size == 0 {
            return fail("agent.replay_capacity and agent.batch_size must be positive".into());
        }
        if a.batch_size > a.min_replay {
            return fail("agent.batch_size must not exceed agent.min_replay".into());
        }
        if a.min_replay > a.replay_capacity {
            return fail("agent.min_replay must not exceed agent.replay_capacity".into());
        }
        if !(0.0..=1.0).contains(&a.gamma) {
            return fail("agent.gamma must be in [0, 1]".into());
        }
        if a.learning_rate <= 0.0 || !(0.0..1.0).contains(&a.rmsprop_decay) {
            return fail("agent.learning_rate must be positive and agent.rmsprop_decay in [0, 1)".into());
        }
        if a.update_interval == 0 || a.target_sync_interval == 0 {
            return fail("agent.update_interval and agent.target_sync_interval must be positive".into());
        }
        let eps = &a.epsilon;
        if !(0.0..=1.0).contains(&eps.start) || !(0.0..=1.0).contains(&eps.end) || eps.end > eps.start
        {
            return fail("agent.epsilon must satisfy 0 <= end <= start <= 1".into());
        }

        let h = &self.harness;
        if h.max_episode_steps == 0 {
            return fail("harness.max_episode_steps must be positive".into());
        }
        if h.decision_interval <= 0.0 {
            return fail("harness.decision_interval must be positive".into());
        }
        if h.metrics_window == 0 || h.checkpoint_interval == 0 {
            return fail("harness.metrics_window and harness.checkpoint_interval must be positive".into());
        }

        if self.eval.n_runs == 0 || self.eval.max_steps_per_run == 0 {
            return fail("eval.n_runs and eval.max_steps_per_run must be positive".into());
        }

        Ok(())
    }
}

/// Apply one `dotted.path=value` override to a parsed TOML tree. The value
/// is parsed as a TOML literal when possible, with a bare-string fallback
/// and comma lists becoming arrays of strings.
pub fn apply_override(root: &mut toml::Value, entry: &str) -> Result<(), ConfigError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(entry.into(), "expected key=value".into()))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(ConfigError::Override(entry.into(), "empty key".into()));
    }

    let value = parse_override_value(raw);

    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            ConfigError::Override(entry.into(), format!("'{}' is not a table", segments[..i].join(".")))
        })?;
        if i == segments.len() - 1 {
            table.insert(segment.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("loop returns on the last segment");
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(snippet) = format!("v = {raw}").parse::<toml::Value>() {
        if let Some(v) = snippet.get("v") {
            return v.clone();
        }
    }
    if raw.contains(',') {
        return toml::Value::Array(
            raw.split(',').map(|s| toml::Value::String(s.trim().to_string())).collect(),
        );
    }
    toml::Value::String(raw.to_string())
}

/// Complete default configuration as a commented TOML template.
pub fn print_defaults() -> String {
    let defaults = RunConfig::default().to_toml_string();
    let header = "\
# Default run configuration. Every section must be present in a config
# file; every field inside a section is optional and defaults to the value
# shown here.
#
# [run]       scenario list, master seed, environment-step budget
# [sim]       vehicle dynamics, integration, car-following constants
# [scenario]  per-scenario geometry, traffic and start randomization
# [encoder]   vehicle scope, sensor range, feature normalization
# [reward]    term weights, magnitudes and rule thresholds
# [agent]     replay memory, batch, discount, optimizer, exploration
# [harness]   episode length, decision interval, metrics/checkpoint cadence
# [eval]      evaluation protocol (runs, step cap, trace emission)
# [output]    default output directory (overridable on the command line)

";
    format!("{header}{defaults}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> &'static str {
        "[run]\n[sim]\n[scenario]\n[encoder]\n[reward]\n[agent]\n[harness]\n[eval]\n"
    }

    #[test]
    fn minimal_config_equals_defaults() {
        let config = RunConfig::from_toml(minimal_toml(), &[]).unwrap();
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn missing_section_names_the_field() {
        let text = "[run]\n[sim]\n[encoder]\n[reward]\n[agent]\n[harness]\n[eval]\n";
        let err = RunConfig::from_toml(text, &[]).unwrap_err();
        assert!(err.to_string().contains("scenario"), "got: {err}");
    }

    #[test]
    fn unknown_field_is_rejected_with_position() {
        let text =
            "[run]\n[sim]\n[scenario]\n[encoder]\n[reward]\n[agent]\nlerning_rate = 1e-4\n[harness]\n[eval]\n";
        let err = RunConfig::from_toml(text, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lerning_rate") || msg.contains("unknown field"), "got: {msg}");
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let overrides = vec![
            "run.budget=1000".to_string(),
            "agent.learning_rate=1e-4".to_string(),
            "scenario.highway.density=0".to_string(),
            "run.scenarios=highway,merging".to_string(),
        ];
        let config = RunConfig::from_toml(minimal_toml(), &overrides).unwrap();
        assert_eq!(config.run.budget, 1000);
        assert_eq!(config.agent.learning_rate, 1e-4);
        assert_eq!(config.scenario.highway.density, 0.0);
        assert_eq!(config.run.scenarios, vec![ScenarioId::Highway, ScenarioId::Merging]);
    }

    #[test]
    fn bad_override_is_reported() {
        let err = RunConfig::from_toml(minimal_toml(), &["no_equals_sign".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Override(..)));
    }

    #[test]
    fn semantic_validation_names_fields() {
        let err = RunConfig::from_toml(minimal_toml(), &["agent.gamma=1.5".into()]).unwrap_err();
        assert!(err.to_string().contains("agent.gamma"), "got: {err}");

        let err =
            RunConfig::from_toml(minimal_toml(), &["encoder.sensor_range=-5".into()]).unwrap_err();
        assert!(err.to_string().contains("sensor_range"), "got: {err}");

        let err = RunConfig::from_toml(minimal_toml(), &["run.budget=0".into()]).unwrap_err();
        assert!(err.to_string().contains("run.budget"), "got: {err}");
    }

    #[test]
    fn defaults_template_round_trips() {
        let template = print_defaults();
        let config = RunConfig::from_toml(&template, &[]).unwrap();
        assert_eq!(config, RunConfig::default());
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let overrides =
            vec!["run.seed=7".to_string(), "harness.metrics_window=500".to_string()];
        let config = RunConfig::from_toml(minimal_toml(), &overrides).unwrap();
        let snapshot = config.to_toml_string();
        let reloaded = RunConfig::from_toml(&snapshot, &[]).unwrap();
        assert_eq!(config, reloaded);
    }

    #[test]
    fn paper_hyperparameters_are_the_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.agent.replay_capacity, 500_000);
        assert_eq!(c.agent.batch_size, 32);
        assert_eq!(c.agent.gamma, 0.9);
        assert_eq!(c.agent.learning_rate, 1e-5);
        assert_eq!(c.agent.rmsprop_decay, 0.95);
        assert_eq!(c.agent.min_replay, 50_000);
        assert_eq!(c.agent.update_interval, 4);
        assert_eq!(c.agent.target_sync_interval, 50_000);
        assert_eq!(c.agent.epsilon.start, 1.0);
        assert_eq!(c.agent.epsilon.end, 0.1);
        assert_eq!(c.agent.epsilon.anneal_steps, 500_000);
        assert_eq!(c.run.budget, 2_000_000);
        assert_eq!(c.harness.max_episode_steps, 200);
        assert_eq!(c.eval.n_runs, 100);
        assert_eq!((c.encoder.scope.lateral, c.encoder.scope.ahead, c.encoder.scope.behind), (2, 2, 1));
        assert_eq!(c.scenario.highway.theta_v_range, (22.2, 31.9));
        assert_eq!(c.scenario.merging.theta_v_range, (11.1, 22.2));
    }
}
