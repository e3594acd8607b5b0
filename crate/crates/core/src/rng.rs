//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own stream, derived from the
//! run seed, a purpose tag and an index (epoch, batch, round, ...). Streams
//! never share state, so adding draws in one place cannot shift another.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::Float;

pub type StreamRng = Xoshiro256PlusPlus;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Dropout = 2,
    Shuffle = 3,
    CaptionSampling = 4,
    Synth = 5,
    Encoder = 6,
    Split = 7,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mixed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (purpose as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ index.wrapping_add(1).wrapping_mul(0x1656_67B1_9E37_79F9);
    Xoshiro256PlusPlus::seed_from_u64(mixed)
}

pub fn uniform(rng: &mut StreamRng, low: Float, high: Float) -> Float {
    low + (high - low) * rng.random::<Float>()
}

/// Fisher-Yates shuffle driven by the given stream.
pub fn shuffle<T>(rng: &mut StreamRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
