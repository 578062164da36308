//! Deep Q-learning for highway maneuver decisions.
//!
//! The crate bundles everything needed to train and evaluate a lane-change /
//! speed-control agent on a deterministic lane-based traffic simulator:
//!
//! - [`sim`]: the traffic simulator (scenarios, background drivers, collision
//!   detection).
//! - [`state`]: the entity-relationship scene model and the fixed-size
//!   relational-grid state tensor fed to the network.
//! - [`reward`]: the prioritized, parameterized reward (collision > traffic
//!   rules > driving style).
//! - [`mlp`]: a from-scratch fully-connected Q-network with exact
//!   backpropagation and RMSProp.
//! - [`agent`]: epsilon-greedy DQN with experience replay and a target
//!   network.
//! - [`harness`]: the episode/training loop, metrics and run-state snapshots.
//! - [`eval`]: the post-training evaluation protocol and report formats.
//! - [`config`]: the structured run configuration shared by all of the above.
//!
//! Everything is deterministic per seed: identical configuration and seed
//! reproduce identical trajectories, metrics files and reports byte for byte.

pub mod agent;
pub mod config;
pub mod eval;
pub mod harness;
pub mod mlp;
pub mod reward;
pub mod rng;
pub mod sim;
pub mod state;
pub mod trace;
