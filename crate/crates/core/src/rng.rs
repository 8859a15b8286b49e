//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream derived
//! from the run seed, so skipping one stage (for example V-Net pretraining
//! in the semantic-only ablation) never shifts the numbers another stage sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    VNetInit = 2,
    VNetShuffle = 3,
    VNetNoise = 4,
    ClassifierInit = 5,
    ClassifierShuffle = 6,
    Synth = 7,
    Test = 99,
}

pub fn stream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
