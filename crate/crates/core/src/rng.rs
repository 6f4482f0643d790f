//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by the master
//! seed, a purpose tag and an index (usually the agent id). Streams never share
//! state, so the draw sequence seen by one agent does not depend on how the
//! agents are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Topology = 1,
    Dataset = 2,
    Initialization = 3,
    Quantization = 4,
    Statistics = 5,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // upper 16 bits tag the purpose, the rest index the consumer
    rng.set_stream(((purpose as u64) << 48) | (index & 0x0000_FFFF_FFFF_FFFF));
    rng
}

/// One independent stream per agent for the given purpose.
pub fn agent_streams(seed: u64, purpose: Purpose, n_agents: usize) -> Vec<Stream> {
    (0..n_agents as u64)
        .map(|i| stream(seed, purpose, i))
        .collect()
}
