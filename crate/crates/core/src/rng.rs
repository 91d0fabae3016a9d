//! Counter-keyed random streams.
//!
//! Every random draw in a simulation is taken from a stream addressed by
//! `(seed, repetition, agent, iteration, purpose)`. Streams are ChaCha8
//! instances: the key comes from the master seed and repetition index, and the
//! 64-bit ChaCha stream selector comes from hashing the remaining triple. Two
//! draws with the same address are identical no matter which thread or in which
//! order they are produced, which is what makes parallel and sequential runs
//! bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator handed out for a single stream.
pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Part of the stream address, so two purposes
/// never share draws even at the same agent and iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Initialization = 1,
    MeanStepsize = 2,
    Stepsize = 3,
    Mixing = 4,
    Gradient = 5,
    DpNoise = 6,
    Data = 7,
    MonteCarlo = 8,
    Probe = 9,
}

/// Address of a stream below the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub agent: u64,
    pub iteration: u64,
    pub purpose: Purpose,
}

impl StreamId {
    pub fn new(agent: usize, iteration: u64, purpose: Purpose) -> Self {
        Self {
            agent: agent as u64,
            iteration,
            purpose,
        }
    }
}

/// Master seed plus repetition index. Cheap to copy; holds no generator state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RandomSource {
    seed: u64,
    repetition: u64,
    key: [u8; 32],
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self::keyed(seed, 0)
    }

    fn keyed(seed: u64, repetition: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = splitmix64(seed ^ 0x5eed_0fd5_6d00_0000);
        state = splitmix64(state ^ repetition.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self {
            seed,
            repetition,
            key,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn repetition(&self) -> u64 {
        self.repetition
    }

    /// Same master seed, different independent repetition.
    pub fn for_repetition(&self, repetition: u64) -> Self {
        Self::keyed(self.seed, repetition)
    }

    pub fn stream(&self, id: StreamId) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(stream_selector(id));
        rng
    }

    /// Shorthand for `stream(StreamId::new(agent, iteration, purpose))`.
    pub fn rng(&self, agent: usize, iteration: u64, purpose: Purpose) -> StreamRng {
        self.stream(StreamId::new(agent, iteration, purpose))
    }
}

fn stream_selector(id: StreamId) -> u64 {
    let mut h = splitmix64(id.purpose as u64);
    h = splitmix64(h ^ id.agent.wrapping_mul(0xd1b5_4a32_d192_ed03));
    splitmix64(h ^ id.iteration.wrapping_mul(0xaef1_7502_108e_f2d9))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
