//! Resumable run-state snapshots.
//!
//! Everything a training run needs to continue bit-exactly lives in one
//! file: a JSON header (config, scene, counters, random-stream states,
//! metrics accumulators) followed by binary sections with the online/target
//! parameters and optimizer accumulators in f64 and the replay memory in
//! f32, all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsRow, RunState, TrainError, WindowAccumulator};
use crate::agent::{DqnAgent, ReplayMemory, Transition};
use crate::config::RunConfig;
use crate::mlp::{Activation, DenseLayer, NetworkParams};
use crate::reward::RewardParams;
use crate::rng::RngState;
use crate::sim::{Action, SceneSnapshot, TrafficScene};

const MAGIC: &[u8; 8] = b"HWRLRS01";

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotHeader {
    version: u32,
    config: RunConfig,
    scene: SceneSnapshot,
    reward_params: RewardParams,
    global_step: u64,
    episodes: u64,
    scenario_cursor: usize,
    prev_action: Action,
    metrics_rows: Vec<MetricsRow>,
    window: WindowAccumulator,
    start_rng: RngState,
    traffic_seed_rng: RngState,
    exploration_rng: RngState,
    updates: u64,
    target_syncs: u64,
    memory_len: u64,
    memory_inserted: u64,
    input_dim: usize,
    layer_sizes: Vec<usize>,
}

fn write_f64s(out: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_f32s(out: &mut impl Write, values: &[f32]) -> std::io::Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(input: &mut impl Read, count: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_f32s(input: &mut impl Read, count: usize) -> std::io::Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    input.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_params(out: &mut impl Write, params: &NetworkParams) -> std::io::Result<()> {
    for layer in &params.layers {
        write_f64s(out, &layer.w)?;
        write_f64s(out, &layer.b)?;
    }
    Ok(())
}

fn read_params(input: &mut impl Read, sizes: &[usize]) -> std::io::Result<NetworkParams> {
    let mut layers = Vec::with_capacity(sizes.len().saturating_sub(1));
    for pair in sizes.windows(2) {
        let (in_dim, out_dim) = (pair[0], pair[1]);
        let w = read_f64s(input, in_dim * out_dim)?;
        let b = read_f64s(input, out_dim)?;
        layers.push(DenseLayer { in_dim, out_dim, w, b });
    }
    Ok(NetworkParams { layers, activation: Activation::Relu })
}

pub fn save_run_state(path: &Path, state: &RunState) -> Result<(), TrainError> {
    let header = SnapshotHeader {
        version: 1,
        config: state.config.clone(),
        scene: state.scene.snapshot(),
        reward_params: state.reward_params,
        global_step: state.global_step,
        episodes: state.episodes,
        scenario_cursor: state.scenario_cursor,
        prev_action: state.prev_action,
        metrics_rows: state.metrics_rows.clone(),
        window: state.window,
        start_rng: RngState::capture(&state.start_rng),
        traffic_seed_rng: RngState::capture(&state.traffic_seed_rng),
        exploration_rng: state.agent.exploration_rng_state(),
        updates: state.agent.updates,
        target_syncs: state.agent.target_syncs,
        memory_len: state.agent.memory.len() as u64,
        memory_inserted: state.agent.memory.inserted(),
        input_dim: state.agent.online.input_dim(),
        layer_sizes: state.agent.online.layer_sizes(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| TrainError::Snapshot(format!("header serialization failed: {e}")))?;

    let mut out = BufWriter::with_capacity(1 << 20, File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&(header_json.len() as u64).to_le_bytes())?;
    out.write_all(&header_json)?;

    write_params(&mut out, &state.agent.online)?;
    write_params(&mut out, &state.agent.target)?;
    for (acc_w, acc_b) in &state.agent.optimizer.acc {
        write_f64s(&mut out, acc_w)?;
        write_f64s(&mut out, acc_b)?;
    }
    for t in state.agent.memory.iter() {
        write_f32s(&mut out, &t.state)?;
        write_f32s(&mut out, &t.next_state)?;
        out.write_all(&(t.action as u32).to_le_bytes())?;
        out.write_all(&t.reward.to_le_bytes())?;
        out.write_all(&[t.terminal as u8])?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_run_state(path: &Path) -> Result<RunState, TrainError> {
    let mut input = BufReader::with_capacity(1 << 20, File::open(path)?);

    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TrainError::Snapshot("bad magic; not a run-state snapshot".into()));
    }
    let mut len_bytes = [0u8; 8];
    input.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    input.read_exact(&mut header_json)?;
    let header: SnapshotHeader = serde_json::from_slice(&header_json)
        .map_err(|e| TrainError::Snapshot(format!("bad header: {e}")))?;
    if header.version != 1 {
        return Err(TrainError::Snapshot(format!("unsupported version {}", header.version)));
    }
    header.config.validate()?;
    if header.layer_sizes.first().copied() != Some(header.input_dim) {
        return Err(TrainError::Snapshot("layer sizes disagree with input_dim".into()));
    }

    let online = read_params(&mut input, &header.layer_sizes)?;
    let target = read_params(&mut input, &header.layer_sizes)?;
    let mut agent = DqnAgent::with_network(
        online,
        header.config.agent,
        header.exploration_rng.restore(),
    );
    agent.target = target;
    for (acc_w, acc_b) in agent.optimizer.acc.iter_mut() {
        *acc_w = read_f64s(&mut input, acc_w.len())?;
        *acc_b = read_f64s(&mut input, acc_b.len())?;
    }

    let dim = header.input_dim;
    let mut transitions = Vec::with_capacity(header.memory_len as usize);
    for _ in 0..header.memory_len {
        let state = read_f32s(&mut input, dim)?;
        let next_state = read_f32s(&mut input, dim)?;
        let mut buf4 = [0u8; 4];
        input.read_exact(&mut buf4)?;
        let action = u32::from_le_bytes(buf4) as usize;
        input.read_exact(&mut buf4)?;
        let reward = f32::from_le_bytes(buf4);
        let mut flag = [0u8; 1];
        input.read_exact(&mut flag)?;
        transitions.push(Transition { state, action, reward, next_state, terminal: flag[0] != 0 });
    }
    agent.memory =
        ReplayMemory::from_parts(header.config.agent.replay_capacity, transitions, header.memory_inserted);
    agent.updates = header.updates;
    agent.target_syncs = header.target_syncs;

    Ok(RunState {
        scene: TrafficScene::from_snapshot(header.scene),
        agent,
        reward_params: header.reward_params,
        global_step: header.global_step,
        episodes: header.episodes,
        scenario_cursor: header.scenario_cursor,
        prev_action: header.prev_action,
        metrics_rows: header.metrics_rows,
        window: header.window,
        start_rng: header.start_rng.restore(),
        traffic_seed_rng: header.traffic_seed_rng.restore(),
        config: header.config,
    })
}
