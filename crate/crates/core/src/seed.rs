//! Seed derivation.
//!
//! Every random stream is `ChaCha8` seeded from
//! `mix(mix(mix(master ^ kind) ^ id) ^ round)`, where `mix` is the SplitMix64
//! finalizer. Any sub-experiment can therefore be replayed from the master
//! seed and its coordinates alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Encoder = 0x01,
    Dataset = 0x02,
    Partition = 0x03,
    GlobalPrompt = 0x04,
    LocalPrompt = 0x05,
    Attention = 0x06,
    ClientSampling = 0x07,
    MiniBatch = 0x08,
    DomainSplit = 0x09,
}

pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, id: u64, round: u64) -> u64 {
    let a = mix64(master ^ (stream as u64).wrapping_mul(0xA076_1D64_78BD_642F));
    let b = mix64(a ^ id);
    mix64(b ^ round.wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, stream: Stream, id: u64, round: u64) -> ChaCha8Rng {
    rng_from(derive_seed(master, stream, id, round))
}
