//! Seed fan-out.
//!
//! Every random stream is a ChaCha8 generator seeded with
//! `splitmix64(master ^ splitmix64(tag ^ splitmix64(a ^ splitmix64(b))))`,
//! where `tag` names the stream and `a`, `b` are stream coordinates such as
//! client id and round index.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Partition = 1,
    Holdout = 2,
    Client = 3,
    SynthesisPool = 4,
    ModelInit = 5,
    ToyTrain = 6,
    ToyTest = 7,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream as u64 ^ splitmix64(a ^ splitmix64(b))))
}

pub fn rng(master: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, a, b))
}
