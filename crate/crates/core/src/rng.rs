//! Seeded RNG streams whose exact position can be checkpointed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{Reader, Writer};
use crate::error::Result;

pub type Rng = ChaCha8Rng;

/// Independent stream per role.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init = 1,
    Network = 2,
    Batch = 3,
    Augment = 4,
    Eval = 5,
    Synthetic = 6,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Exact position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.bytes(&self.seed);
        w.u64(self.stream);
        w.u128(self.word_pos);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        Ok(RngState {
            seed,
            stream: r.u64()?,
            word_pos: r.u128()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn restore_continues_stream() {
        let mut a = stream(9, Stream::Batch);
        for _ in 0..37 {
            a.next_u32();
        }
        let mut b = RngState::capture(&a).restore();
        let xs: Vec<u64> = (0..10).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..10).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn streams_are_independent() {
        let mut a = stream(9, Stream::Batch);
        let mut b = stream(9, Stream::Network);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
