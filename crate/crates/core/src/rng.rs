//! Counter-keyed random substreams.
//!
//! Every (seed, stream, counter) triple maps to an independent ChaCha8 stream,
//! so results never depend on the order or thread in which particles are
//! advanced.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::State;

/// Stream id used for initial draws from the base density.
pub const INIT_STREAM: u64 = u64::MAX;
/// Stream id used for resampling decisions.
pub const RESAMPLE_STREAM: u64 = u64::MAX - 1;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, stream: u64, counter: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ counter.rotate_left(17));
    ChaCha8Rng::seed_from_u64(key)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> State {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}
