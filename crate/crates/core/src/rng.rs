//! Named random streams.
//!
//! Every consumer of randomness draws from its own stream, keyed by the run
//! seed, a purpose and an index (iteration, subject, case). Streams are
//! independent of execution order, so resumed or parallel runs reproduce
//! uninterrupted sequential ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Subject,
    Timestep,
    Noise,
    Sampling,
    PseudoVal,
    Toy,
}

impl Stream {
    fn salt(self) -> u64 {
        match self {
            Stream::Init => 0x9e37_79b9_7f4a_7c15,
            Stream::Subject => 0xbf58_476d_1ce4_e5b9,
            Stream::Timestep => 0x94d0_49bb_1331_11eb,
            Stream::Noise => 0x2545_f491_4f6c_dd1d,
            Stream::Sampling => 0xd6e8_feb8_6659_fd93,
            Stream::PseudoVal => 0xa076_1d64_78bd_642f,
            Stream::Toy => 0xe703_7ed1_a0b4_28db,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.salt());
    rng.set_stream(index);
    rng
}

/// Stable 64-bit hash of a string (first 8 bytes of its SHA-256).
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn standard_normal_vec<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
