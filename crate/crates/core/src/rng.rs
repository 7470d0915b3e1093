//! Seeded random streams.
//!
//! Every random draw in a fit comes from a ChaCha stream keyed by the master
//! seed plus a path of indices (outer iteration, step, column, ...), so a run
//! is reproducible draw for draw regardless of how work is scheduled.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Real;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream from `seed` and an index path.
pub fn substream(seed: u64, path: &[u64]) -> StreamRng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Array of i.i.d. standard-normal draws.
pub fn standard_normal<T: Real, D: Dimension, Sh: ShapeBuilder<Dim = D>, R: Rng + ?Sized>(
    shape: Sh,
    rng: &mut R,
) -> Array<T, D> {
    Array::from_shape_simple_fn(shape, || T::lit(rng.sample::<f64, _>(StandardNormal)))
}
