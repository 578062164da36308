//! Seeded random-number streams.
//!
//! One master seed drives the whole run. Independent concerns draw from
//! independent ChaCha streams so that, e.g., adding an exploration draw never
//! shifts the traffic spawn sequence. Stream assignment:
//!
//! | stream | consumer                                  |
//! |--------|-------------------------------------------|
//! | 0      | traffic (per-scene seeds, spawning)       |
//! | 1      | exploration (epsilon-greedy draws)        |
//! | 2      | start randomization and theta_v sampling  |
//! | 3      | evaluation run seeds                      |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const STREAM_TRAFFIC: u64 = 0;
pub const STREAM_EXPLORATION: u64 = 1;
pub const STREAM_START: u64 = 2;
pub const STREAM_EVAL: u64 = 3;

/// A seeded generator on a dedicated stream of the master seed.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Exact, serializable state of a ChaCha stream (for run-state snapshots).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
