//! Seeding. One master seed expands into independent named ChaCha streams so
//! each component can be varied without disturbing the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    World = 1,
    ModelInit = 2,
    SchedulerInit = 3,
    Masking = 4,
    Batching = 5,
    Policy = 6,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::World => "world",
            Stream::ModelInit => "model-init",
            Stream::SchedulerInit => "scheduler-init",
            Stream::Masking => "masking",
            Stream::Batching => "batching",
            Stream::Policy => "policy",
        }
    }
}

pub fn stream(master: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(which as u64);
    rng
}

/// Serializable position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &StreamRng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
