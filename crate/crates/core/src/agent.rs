//! Q-learning agent: epsilon-greedy policy, experience replay, target
//! network and TD-target computation.
//!
//! Replay states are stored in single precision (like checkpoints); all
//! training math runs in double precision. One gradient update processes a
//! uniformly sampled batch every `update_interval`-th environment step once
//! the memory holds `min_replay` transitions, and the target network is
//! copied from the online network every `target_sync_interval`-th step.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mlp::{
    backward_into, rmsprop_step, Gradients, MlpError, NetworkParams, OptimizerState, Scratch,
};
use crate::rng::{stream_rng, RngState, STREAM_EXPLORATION};

/// One learning sample; `next_state` is ignored for terminal transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f32>,
    pub action: usize,
    pub reward: f32,
    pub next_state: Vec<f32>,
    pub terminal: bool,
}

/// FIFO ring buffer with uniform without-replacement batch sampling.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    buf: VecDeque<Transition>,
    capacity: usize,
    inserted: u64,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        Self { buf: VecDeque::with_capacity(capacity.min(1 << 20)), capacity, inserted: 0 }
    }

    /// Rebuild a memory from snapshotted contents (oldest first).
    pub fn from_parts(capacity: usize, transitions: Vec<Transition>, inserted: u64) -> Self {
        let mut buf = VecDeque::with_capacity(capacity.min(1 << 20));
        buf.extend(transitions);
        Self { buf, capacity, inserted }
    }

    pub fn push(&mut self, transition: Transition) {
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(transition);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of insertions, including evicted ones.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.buf[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.buf.iter()
    }

    /// Uniform sample of distinct indices.
    pub fn sample_indices(&self, rng: &mut ChaCha8Rng, amount: usize) -> Vec<usize> {
        assert!(amount <= self.buf.len(), "batch larger than memory");
        rand::seq::index::sample(rng, self.buf.len(), amount).into_vec()
    }
}

/// Piecewise-linear exploration schedule, clamped at `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self { start: 1.0, end: 0.1, anneal_steps: 500_000 }
    }
}

impl EpsilonSchedule {
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 {
            return self.end;
        }
        let progress = step as f64 / self.anneal_steps as f64;
        (self.start - (self.start - self.end) * progress).max(self.end)
    }
}

/// Epsilon-greedy action selection; greedy ties resolve to the lowest
/// index. No random numbers are drawn when `epsilon <= 0`.
pub fn select_action(q_values: &[f64], epsilon: f64, rng: &mut ChaCha8Rng) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..q_values.len());
    }
    greedy_action(q_values)
}

/// Index of the maximal Q-value, lowest index on ties.
pub fn greedy_action(q_values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &q) in q_values.iter().enumerate().skip(1) {
        if q > q_values[best] {
            best = i;
        }
    }
    best
}

/// TD target for one transition: `r` if terminal, else
/// `r + gamma * max_a Q_target(s', a)`.
pub fn td_target(
    transition: &Transition,
    target_net: &NetworkParams,
    gamma: f64,
    scratch: &mut Scratch,
    next_buf: &mut Vec<f64>,
) -> f64 {
    if transition.terminal {
        return transition.reward as f64;
    }
    next_buf.clear();
    next_buf.extend(transition.next_state.iter().map(|&v| v as f64));
    target_net.forward_cached(next_buf, scratch);
    let max_q = scratch.output().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    transition.reward as f64 + gamma * max_q
}

/// Batch TD targets against a fixed target network.
pub fn td_targets(batch: &[&Transition], target_net: &NetworkParams, gamma: f64) -> Vec<f64> {
    let mut scratch = Scratch::for_params(target_net);
    let mut buf = Vec::new();
    batch.iter().map(|t| td_target(t, target_net, gamma, &mut scratch, &mut buf)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    /// Transitions required in memory before gradient updates begin.
    pub min_replay: usize,
    /// Gradient update every this many environment steps.
    pub update_interval: u64,
    /// Target-network copy every this many environment steps.
    pub target_sync_interval: u64,
    pub epsilon: EpsilonSchedule,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            replay_capacity: 500_000,
            batch_size: 32,
            gamma: 0.9,
            learning_rate: 1e-5,
            rmsprop_decay: 0.95,
            min_replay: 50_000,
            update_interval: 4,
            target_sync_interval: 50_000,
            epsilon: EpsilonSchedule::default(),
        }
    }
}

/// What a call to [`DqnAgent::train_tick`] did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TickOutcome {
    pub updated: bool,
    pub synced: bool,
}

/// Online/target networks, optimizer, replay memory and exploration state.
pub struct DqnAgent {
    pub config: AgentConfig,
    pub online: NetworkParams,
    pub target: NetworkParams,
    pub optimizer: OptimizerState,
    pub memory: ReplayMemory,
    pub updates: u64,
    pub target_syncs: u64,
    rng: ChaCha8Rng,
    scratch: Scratch,
    grads: Gradients,
    state_buf: Vec<f64>,
    next_buf: Vec<f64>,
}

impl DqnAgent {
    /// Freshly initialized production network for the given input width.
    pub fn new(input_dim: usize, config: AgentConfig, seed: u64) -> Result<Self, MlpError> {
        let online = NetworkParams::init(input_dim, seed)?;
        Ok(Self::with_network(online, config, stream_rng(seed, STREAM_EXPLORATION)))
    }

    /// Wrap an existing network (loaded checkpoints, toy problems).
    pub fn with_network(online: NetworkParams, config: AgentConfig, rng: ChaCha8Rng) -> Self {
        let target = online.clone();
        let optimizer = OptimizerState::new(&online, config.learning_rate, config.rmsprop_decay);
        let scratch = Scratch::for_params(&online);
        let grads = Gradients::zeros_like(&online);
        Self {
            config,
            memory: ReplayMemory::new(config.replay_capacity),
            optimizer,
            target,
            online,
            updates: 0,
            target_syncs: 0,
            rng,
            scratch,
            grads,
            state_buf: Vec::new(),
            next_buf: Vec::new(),
        }
    }

    pub fn epsilon_at(&self, step: u64) -> f64 {
        self.config.epsilon.epsilon_at(step)
    }

    /// Online-network Q-values for a state.
    pub fn q_values(&mut self, state: &[f64]) -> Vec<f64> {
        self.online.forward_cached(state, &mut self.scratch);
        self.scratch.output().to_vec()
    }

    /// Epsilon-greedy action for the schedule value at `step`.
    pub fn act(&mut self, state: &[f64], step: u64) -> usize {
        let epsilon = self.epsilon_at(step);
        self.online.forward_cached(state, &mut self.scratch);
        let q = self.scratch.output();
        if epsilon > 0.0 && self.rng.gen::<f64>() < epsilon {
            return self.rng.gen_range(0..q.len());
        }
        greedy_action(q)
    }

    pub fn observe(&mut self, transition: Transition) {
        self.memory.push(transition);
    }

    /// Run the per-step training bookkeeping for the completed environment
    /// step `global_step` (counted from 1): a gradient update every
    /// `update_interval`-th step once the memory is warm, and a target sync
    /// every `target_sync_interval`-th step.
    pub fn train_tick(&mut self, global_step: u64) -> TickOutcome {
        let mut outcome = TickOutcome::default();

        if self.memory.len() >= self.config.min_replay
            && global_step % self.config.update_interval == 0
        {
            let indices = self.memory.sample_indices(&mut self.rng, self.config.batch_size);
            self.grads.reset();
            for idx in indices {
                let (target_value, action) = {
                    let t = self.memory.get(idx);
                    let y = td_target(
                        t,
                        &self.target,
                        self.config.gamma,
                        &mut self.scratch,
                        &mut self.next_buf,
                    );
                    self.state_buf.clear();
                    self.state_buf.extend(t.state.iter().map(|&v| v as f64));
                    (y, t.action)
                };
                backward_into(
                    &self.online,
                    &self.state_buf,
                    action,
                    target_value,
                    &mut self.scratch,
                    &mut self.grads,
                );
            }
            self.grads.scale(1.0 / self.config.batch_size as f64);
            rmsprop_step(&mut self.online, &mut self.optimizer, &self.grads);
            self.updates += 1;
            outcome.updated = true;
        }

        if global_step % self.config.target_sync_interval == 0 {
            self.target = self.online.clone();
            self.target_syncs += 1;
            outcome.synced = true;
        }

        outcome
    }

    pub fn exploration_rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn restore_exploration_rng(&mut self, state: &RngState) {
        self.rng = state.restore();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn transition(tag: f32) -> Transition {
        Transition {
            state: vec![tag, -tag],
            action: 0,
            reward: tag,
            next_state: vec![tag + 1.0, -tag],
            terminal: false,
        }
    }

    #[test]
    fn epsilon_schedule_matches_the_fixed_points() {
        let schedule = EpsilonSchedule::default();
        assert_eq!(schedule.epsilon_at(0), 1.0);
        assert_eq!(schedule.epsilon_at(250_000), 0.55);
        assert_eq!(schedule.epsilon_at(500_000), 0.1);
        assert_eq!(schedule.epsilon_at(2_000_000), 0.1);
    }

    #[test]
    fn greedy_selection_and_tie_breaking() {
        let mut rng = stream_rng(0, 1);
        assert_eq!(select_action(&[0.1, 0.9, 0.2, 0.0, 0.3], 0.0, &mut rng), 1);
        assert_eq!(select_action(&[1.0, 1.0, 0.0, 0.0, 0.0], 0.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = stream_rng(7, 1);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            counts[select_action(&[5.0, 0.0, 0.0, 0.0, 0.0], 1.0, &mut rng)] += 1;
        }
        // 3 sigma around the uniform expectation of 2000.
        let sigma = (draws as f64 * 0.2 * 0.8).sqrt();
        for (action, &n) in counts.iter().enumerate() {
            let deviation = (n as f64 - 2000.0).abs();
            assert!(deviation <= 3.0 * sigma, "action {action} drawn {n} times");
        }
    }

    #[test]
    fn replay_memory_evicts_fifo() {
        let mut memory = ReplayMemory::new(3);
        for i in 0..4 {
            memory.push(transition(i as f32));
        }
        assert_eq!(memory.len(), 3);
        assert_eq!(memory.get(0).reward, 1.0, "oldest transition evicted first");
        assert_eq!(memory.inserted(), 4);
    }

    #[test]
    fn replay_memory_grows_until_capacity() {
        let mut memory = ReplayMemory::new(10);
        for i in 0..7 {
            memory.push(transition(i as f32));
            assert_eq!(memory.len(), i + 1);
        }
    }

    #[test]
    fn stored_transitions_come_back_bit_identical() {
        let mut memory = ReplayMemory::new(4);
        let t = Transition {
            state: vec![0.123_456_79_f32, -1.5e-7],
            action: 3,
            reward: -0.25,
            next_state: vec![f32::MIN_POSITIVE, 1.0],
            terminal: true,
        };
        memory.push(t.clone());
        assert_eq!(*memory.get(0), t);
    }

    #[test]
    fn batch_sampling_is_uniform_without_replacement() {
        let mut memory = ReplayMemory::new(100);
        for i in 0..100 {
            memory.push(transition(i as f32));
        }
        let mut rng = stream_rng(3, 1);
        let mut inclusion = vec![0usize; 100];
        let batches = 5_000;
        for _ in 0..batches {
            let idx = memory.sample_indices(&mut rng, 10);
            let mut seen = std::collections::HashSet::new();
            for i in idx {
                assert!(seen.insert(i), "duplicate index inside one batch");
                inclusion[i] += 1;
            }
        }
        // Each item has inclusion probability 0.1 per batch.
        let expected = batches as f64 * 0.1;
        let sigma = (batches as f64 * 0.1 * 0.9).sqrt();
        for (i, &n) in inclusion.iter().enumerate() {
            assert!(
                (n as f64 - expected).abs() < 5.0 * sigma,
                "item {i} included {n} times (expected about {expected})"
            );
        }
    }

    /// A constant network: zero weights, fixed output biases.
    fn constant_net(outputs: &[f64], inputs: usize) -> NetworkParams {
        let mut params =
            NetworkParams::with_layer_sizes(&[inputs, outputs.len()], 0).unwrap();
        params.layers[0].w.fill(0.0);
        params.layers[0].b.copy_from_slice(outputs);
        params
    }

    #[test]
    fn td_targets_match_the_backup_rule() {
        let target_net = constant_net(&[2.0, 1.0], 2);
        let terminal = Transition {
            state: vec![0.0, 0.0],
            action: 0,
            reward: -1.0,
            next_state: vec![0.0, 0.0],
            terminal: true,
        };
        let ongoing = Transition { reward: 0.5, terminal: false, ..terminal.clone() };
        let ys = td_targets(&[&terminal, &ongoing], &target_net, 0.9);
        assert_eq!(ys[0], -1.0);
        assert_eq!(ys[1], 0.5 + 0.9 * 2.0);

        let ys = td_targets(&[&ongoing], &target_net, 0.0);
        assert_eq!(ys[0], 0.5, "zero discount degenerates to the reward");
    }

    fn toy_agent(min_replay: usize, update_interval: u64, sync_interval: u64) -> DqnAgent {
        let config = AgentConfig {
            replay_capacity: 64,
            batch_size: 4,
            min_replay,
            update_interval,
            target_sync_interval: sync_interval,
            learning_rate: 1e-3,
            ..AgentConfig::default()
        };
        let net = NetworkParams::with_layer_sizes(&[2, 4, 2], 5).unwrap();
        DqnAgent::with_network(net, config, stream_rng(5, 1))
    }

    #[test]
    fn no_updates_before_the_replay_threshold() {
        let mut agent = toy_agent(32, 4, 1_000);
        for step in 1..=31u64 {
            agent.observe(transition(step as f32));
            let outcome = agent.train_tick(step);
            assert!(!outcome.updated, "updated with only {} transitions", agent.memory.len());
        }
        assert_eq!(agent.updates, 0);
    }

    #[test]
    fn update_and_sync_cadence() {
        let mut agent = toy_agent(8, 4, 12);
        let mut expected_updates = 0;
        let mut expected_syncs = 0;
        for step in 1..=48u64 {
            agent.observe(transition(step as f32));
            let outcome = agent.train_tick(step);
            if agent.memory.len() >= 8 && step % 4 == 0 {
                expected_updates += 1;
                assert!(outcome.updated);
            } else {
                assert!(!outcome.updated);
            }
            if step % 12 == 0 {
                expected_syncs += 1;
                assert!(outcome.synced);
            }
        }
        assert_eq!(agent.updates, expected_updates);
        assert_eq!(agent.target_syncs, expected_syncs);
    }

    #[test]
    fn target_matches_online_exactly_after_sync() {
        let mut agent = toy_agent(4, 1, 8);
        for step in 1..=7u64 {
            agent.observe(transition(step as f32));
            agent.train_tick(step);
        }
        assert_ne!(agent.online, agent.target, "online has moved since the last sync");
        agent.observe(transition(8.0));
        let outcome = agent.train_tick(8);
        assert!(outcome.synced);
        assert_eq!(agent.online, agent.target);
        let x = [0.3, -0.7];
        assert_eq!(agent.online.forward(&x).unwrap(), agent.target.forward(&x).unwrap());
    }

    #[test]
    fn target_only_changes_at_sync_steps() {
        let mut agent = toy_agent(4, 1, 16);
        let snapshot = agent.target.clone();
        for step in 1..=15u64 {
            agent.observe(transition(step as f32));
            agent.train_tick(step);
            assert_eq!(agent.target, snapshot);
        }
        agent.observe(transition(16.0));
        agent.train_tick(16);
        assert_ne!(agent.target, snapshot);
    }

    #[test]
    fn greedy_policy_is_deterministic_at_zero_epsilon() {
        let mut agent = toy_agent(4, 4, 100);
        agent.config.epsilon = EpsilonSchedule { start: 0.0, end: 0.0, anneal_steps: 1 };
        let state = [0.25, -0.5];
        let first = agent.act(&state, 10);
        for _ in 0..20 {
            assert_eq!(agent.act(&state, 10), first);
        }
    }

    /// Two-state, two-action deterministic MDP with a value-iteration
    /// oracle: the linear Q-network must converge to the fixed point.
    #[test]
    fn toy_mdp_q_values_converge_to_the_value_iteration_fixed_point() {
        // rewards[s][a], next[s][a]
        let rewards = [[1.0, 0.0], [0.0, 2.0]];
        let next = [[0usize, 1], [0, 1]];
        let gamma = 0.9;

        // Independent oracle: dense value iteration.
        let mut q_star = [[0.0f64; 2]; 2];
        for _ in 0..2_000 {
            let mut updated = q_star;
            for s in 0..2 {
                for a in 0..2 {
                    let s2 = next[s][a];
                    let max_next = q_star[s2][0].max(q_star[s2][1]);
                    updated[s][a] = rewards[s][a] + gamma * max_next;
                }
            }
            q_star = updated;
        }
        assert!((q_star[1][1] - 20.0).abs() < 1e-9);

        let config = AgentConfig {
            replay_capacity: 10_000,
            batch_size: 32,
            gamma,
            learning_rate: 1e-3,
            rmsprop_decay: 0.95,
            min_replay: 100,
            update_interval: 1,
            target_sync_interval: 200,
            epsilon: EpsilonSchedule { start: 1.0, end: 0.5, anneal_steps: 2_000 },
        };
        let net = NetworkParams::with_layer_sizes(&[2, 2], 3).unwrap();
        let mut agent = DqnAgent::with_network(net, config, stream_rng(11, 1));

        let one_hot = |s: usize| -> [f64; 2] {
            let mut x = [0.0; 2];
            x[s] = 1.0;
            x
        };
        let mut state = 0usize;
        for step in 1..=45_000u64 {
            let action = agent.act(&one_hot(state), step);
            let next_state = next[state][action];
            agent.observe(Transition {
                state: one_hot(state).iter().map(|&v| v as f32).collect(),
                action,
                reward: rewards[state][action] as f32,
                next_state: one_hot(next_state).iter().map(|&v| v as f32).collect(),
                terminal: false,
            });
            agent.train_tick(step);
            state = next_state;
        }

        for s in 0..2 {
            let q = agent.q_values(&one_hot(s));
            for a in 0..2 {
                let err = (q[a] - q_star[s][a]).abs();
                assert!(err < 1e-2, "Q({s},{a}) = {} vs Q* = {} (err {err})", q[a], q_star[s][a]);
            }
        }
    }
}
