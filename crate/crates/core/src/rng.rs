//! Seed streams. One master seed fans out to independent ChaCha8 streams, so
//! changing how many draws one consumer makes never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Sampling = 3,
    Data = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub master: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    /// ChaCha8 keyed by the master seed, on the stream numbered by `which`.
    pub fn stream(&self, which: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(which as u64);
        rng
    }

    /// Seed for the `run`-th repetition of an experiment.
    pub fn run(&self, run: usize) -> Seeds {
        Seeds::new(self.master.wrapping_add(run as u64))
    }
}
