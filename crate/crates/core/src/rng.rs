//! Keyed random substreams.
//!
//! A run has one seed. Every consumer (an observation's latent draw in a
//! given sweep, the location block, the covariance block, ...) gets its own
//! ChaCha stream keyed by `(seed, chain, sweep)` and selected by a stream id,
//! so results do not depend on the order observations are visited in.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream ids at the top of the range are reserved for parameter blocks;
/// observation ids must stay below them.
pub const RESERVED_STREAMS: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Location,
    Covariance,
    Initial,
    Predictive,
}

impl Block {
    fn stream_id(self) -> u64 {
        u64::MAX
            - match self {
                Block::Location => 0,
                Block::Covariance => 1,
                Block::Initial => 2,
                Block::Predictive => 3,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Streams {
    seed: u64,
    chain: u64,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        Self { seed, chain: 0 }
    }

    pub fn for_chain(seed: u64, chain: u64) -> Self {
        Self { seed, chain }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, sweep: u64) -> [u8; 32] {
        let mut state = self.seed ^ 0x9E37_79B9_7F4A_7C15;
        let mut out = [0u8; 32];
        let words = [self.chain, sweep, 0x5EED, 0xC0FFEE];
        for (chunk, w) in out.chunks_mut(8).zip(words) {
            state = splitmix64(state ^ splitmix64(w));
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        out
    }

    /// Stream for one observation in one sweep.
    pub fn observation(&self, sweep: u64, id: u64) -> StreamRng {
        debug_assert!(id < u64::MAX - RESERVED_STREAMS);
        let mut rng = ChaCha8Rng::from_seed(self.key(sweep));
        rng.set_stream(id);
        rng
    }

    /// Stream for a parameter block in one sweep.
    pub fn block(&self, sweep: u64, block: Block) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.key(sweep));
        rng.set_stream(block.stream_id());
        rng
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = Streams::new(42);
        let a: u64 = s.observation(3, 7).random();
        let b: u64 = s.observation(3, 7).random();
        assert_eq!(a, b);
        let others: [u64; 4] = [
            s.observation(3, 8).random(),
            s.observation(4, 7).random(),
            Streams::new(43).observation(3, 7).random(),
            Streams::for_chain(42, 1).observation(3, 7).random(),
        ];
        assert!(others.iter().all(|&o| o != a));
        let blk: u64 = s.block(3, Block::Location).random();
        assert_ne!(blk, a);
    }
}
