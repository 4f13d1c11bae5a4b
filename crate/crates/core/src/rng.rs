//! Per-replication random streams.
//!
//! Every `(condition, replication)` work unit draws from its own ChaCha20
//! stream: the key is derived from the master seed and the 64-bit stream id
//! packs the condition index (high 32 bits) and replication index (low 32
//! bits). Distinct triples therefore never share keystream, and results do
//! not depend on the order in which work units execute.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type Stream = ChaCha20Rng;

pub fn derive_stream(master_seed: u64, condition_index: usize, replication_index: usize) -> Stream {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(stream_id(condition_index, replication_index));
    rng
}

fn stream_id(condition_index: usize, replication_index: usize) -> u64 {
    assert!(
        condition_index <= u32::MAX as usize && replication_index <= u32::MAX as usize,
        "stream indices must fit in 32 bits"
    );
    ((condition_index as u64) << 32) | replication_index as u64
}
