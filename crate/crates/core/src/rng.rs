//! Seeded random streams. Each consumer draws from its own ChaCha stream, so
//! one user-facing seed never yields correlated values across purposes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Scores = 2,
    Synthetic = 3,
    Sampler = 4,
    Augment = 5,
    FdEntries = 6,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
