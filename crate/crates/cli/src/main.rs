//! Command-line workflows: train, evaluate, sweep desired speeds, replay
//! traces, print the default configuration.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 runtime
//! error, 3 trace-integrity error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use highway_rl::config::{print_defaults, ConfigError, RunConfig};
use highway_rl::eval::{evaluate, replay_report, replay_run, speed_sweep, EvalError, EvalReport};
use highway_rl::harness::{load_policy, resume, train, TrainError};
use highway_rl::sim::ScenarioId;
use highway_rl::trace::{read_trace, TraceError, TraceRecord};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_INTEGRITY: u8 = 3;

#[derive(Parser)]
#[command(
    name = "highway-rl",
    about = "Deep Q-learning for highway maneuver decisions on a lane-based traffic simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write checkpoints, metrics and a config snapshot.
    Train(TrainArgs),
    /// Evaluate a checkpoint over independent greedy runs.
    Eval(EvalArgs),
    /// Evaluate a checkpoint across a list of desired speeds.
    Sweep(SweepArgs),
    /// Recompute metrics from trace files and verify them.
    Replay(ReplayArgs),
    /// Print the complete default configuration.
    PrintDefaults,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config value by dotted path, e.g. run.budget=1000.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to $HIGHWAY_RL_OUT, then the config).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Resume from a run-state snapshot instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory to load the policy from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scenario to evaluate on (highway or merging).
    #[arg(long)]
    scenario: ScenarioId,
    /// Number of evaluation runs.
    #[arg(long)]
    runs: Option<u32>,
    /// Fixed desired speed (m/s); sampled per run when omitted.
    #[arg(long)]
    theta_v: Option<f64>,
    /// Evaluate on an empty road (no background traffic).
    #[arg(long)]
    empty: bool,
    /// Run configuration (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scenario: ScenarioId,
    /// Desired speeds to sweep (m/s).
    #[arg(long, value_delimiter = ',', required = true)]
    theta_v: Vec<f64>,
    #[arg(long)]
    empty: bool,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    runs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// A run trace (.jsonl) or an evaluation directory with report.json.
    #[arg(long)]
    trace: PathBuf,
    /// Config to check the trace's encoder fingerprint against.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
    Integrity(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) | CliError::Integrity(m) => {
                write!(f, "{m}")
            }
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Integrity(_) => EXIT_INTEGRITY,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(inner) => inner.into(),
            TrainError::Build(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InputDimMismatch { .. } => CliError::Validation(e.to_string()),
            EvalError::Trace(TraceError::Integrity(_)) | EvalError::Trace(TraceError::Corrupt { .. }) => {
                CliError::Integrity(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Integrity(e.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Replay(args) => cmd_replay(args),
        Command::PrintDefaults => {
            print!("{}", print_defaults());
            Ok(())
        }
    }
}

fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut overrides = overrides.to_vec();
    if let Some(seed) = seed {
        overrides.push(format!("run.seed={seed}"));
    }
    let config = match path {
        Some(path) => RunConfig::load_with_overrides(path, &overrides)?,
        None => {
            let defaults = print_defaults();
            RunConfig::from_toml(&defaults, &overrides)?
        }
    };
    Ok(config)
}

fn resolve_out_dir(cli_arg: Option<PathBuf>, config: &RunConfig) -> PathBuf {
    cli_arg
        .or_else(|| std::env::var_os("HIGHWAY_RL_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&config.output.dir))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let config = load_config(Some(&args.config), &args.set, args.seed)?;
    let out_dir = resolve_out_dir(args.out_dir, &config);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    std::fs::write(out_dir.join("config_resolved.toml"), config.to_toml_string())
        .map_err(|e| CliError::Runtime(format!("cannot write config snapshot: {e}")))?;

    let outcome = match &args.resume {
        Some(snapshot) => resume(snapshot, &out_dir, Some(config.run.budget))?,
        None => train(&config, &out_dir)?,
    };

    println!("trained {} steps over {} episodes", outcome.steps, outcome.episodes);
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("metrics: {}", outcome.metrics_path.display());
    if let Some(path) = outcome.run_state_path {
        println!("run state: {}", path.display());
    }
    Ok(())
}

fn warn_theta_out_of_range(config: &RunConfig, scenario: ScenarioId, theta_v: Option<f64>) {
    if let Some(theta) = theta_v {
        let (lo, hi) = config.scenario_config(scenario).theta_v_range;
        if theta < lo || theta > hi {
            eprintln!(
                "warning: theta_v = {theta} m/s is outside the {scenario} range [{lo}, {hi}]; proceeding"
            );
        }
    }
}

fn print_report(report: &EvalReport) {
    println!("scenario:                    {}", report.scenario);
    match report.theta_v {
        Some(t) => println!("desired speed:               {t} m/s"),
        None => println!("desired speed:               sampled per run"),
    }
    println!("runs:                        {}", report.runs);
    println!("collision rate:              {:.2} %", report.collision_rate_pct);
    if report.collision_free {
        println!(
            "avg distance between coll.:  {:.2} km (no collisions; total distance)",
            report.avg_distance_between_collisions_km
        );
    } else {
        println!(
            "avg distance between coll.:  {:.2} km",
            report.avg_distance_between_collisions_km
        );
    }
    println!("rule violations:             {:.2} % of timesteps", report.rule_violation_pct);
    let lanes: Vec<String> =
        report.lane_distribution_pct.iter().map(|p| format!("{p:.1}%")).collect();
    println!("lane distribution:           [{}]", lanes.join(", "));
    println!("avg speed:                   {:.2} m/s", report.avg_speed_mps);
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut overrides = args.set.clone();
    if let Some(runs) = args.runs {
        overrides.push(format!("eval.n_runs={runs}"));
    }
    let config = load_config(args.config.as_deref(), &overrides, args.seed)?;
    warn_theta_out_of_range(&config, args.scenario, args.theta_v);

    let (policy, trained_steps) =
        load_policy(&args.checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    let out_dir = resolve_out_dir(args.out_dir, &config).join(format!("eval_{}", args.scenario));
    let report = evaluate(
        &policy,
        &config,
        args.scenario,
        args.theta_v,
        args.empty,
        config.run.seed,
        Some(&out_dir),
    )?;

    println!("checkpoint trained for {trained_steps} steps");
    print_report(&report);
    println!("report written to {}", out_dir.display());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let mut overrides = args.set.clone();
    if let Some(runs) = args.runs {
        overrides.push(format!("eval.n_runs={runs}"));
    }
    let config = load_config(args.config.as_deref(), &overrides, args.seed)?;
    for theta in &args.theta_v {
        warn_theta_out_of_range(&config, args.scenario, Some(*theta));
    }
    let (policy, _) =
        load_policy(&args.checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    let out_dir = resolve_out_dir(args.out_dir, &config).join(format!("sweep_{}", args.scenario));
    let rows = speed_sweep(
        &policy,
        &config,
        args.scenario,
        &args.theta_v,
        args.empty,
        config.run.seed,
        Some(&out_dir),
    )?;

    println!("theta_v [m/s]  avg speed [m/s]  collision rate [%]");
    for row in &rows {
        println!("{:>12.1}  {:>15.2}  {:>18.2}", row.theta_v, row.avg_speed_mps, row.collision_rate_pct);
    }
    println!("sweep written to {}", out_dir.display());
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<(), CliError> {
    let config = load_config(args.config.as_deref(), &args.set, None)?;

    if args.trace.is_dir() {
        let report = replay_report(&args.trace)?;
        println!("replayed {} runs: metrics match", report.runs);
        print_report(&report);
        return Ok(());
    }

    // Single run trace: verify the summary, then print the step table.
    let records = read_trace(&args.trace)?;
    let meta = records.iter().find_map(|r| match r {
        TraceRecord::Meta(m) => Some(m.clone()),
        _ => None,
    });
    if let Some(meta) = &meta {
        if !meta.matches_encoder(&config.encoder) {
            eprintln!(
                "warning: trace encoder fingerprint (scope {}x{}x{}, range {}, input {}) differs from the active config",
                meta.scope_lateral,
                meta.scope_ahead,
                meta.scope_behind,
                meta.sensor_range,
                meta.input_dim
            );
        }
    }
    let lanes = meta
        .as_ref()
        .map(|m| match m.scenario {
            ScenarioId::Highway => config.scenario.highway.lanes as usize,
            ScenarioId::Merging => config.scenario.merging.lanes as usize + 1,
        })
        .unwrap_or(3);
    let (_, summary) = replay_run(&args.trace, lanes)?;

    println!("{:>5}  {:>17}  {:>4}  {:>8}  {:>6}  {:>7}  events", "step", "action", "lane", "s [m]", "v", "reward");
    for record in &records {
        if let TraceRecord::Step(step) = record {
            println!(
                "{:>5}  {:>17}  {:>4}  {:>8.1}  {:>6.2}  {:>7.3}  {}",
                step.step,
                format!("{:?}", step.action),
                step.ego.lane,
                step.ego.s,
                step.ego.v,
                step.reward,
                step.events.len()
            );
        }
    }
    println!(
        "metrics match: {} steps, {:.1} m, collided: {}",
        summary.steps, summary.distance_m, summary.collided
    );
    Ok(())
}
