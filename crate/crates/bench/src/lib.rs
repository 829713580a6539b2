//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use panreg_core::{Dims, DisplacementField, FeatureMap, Volume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn volume(dims: Dims, seed: u64) -> Volume {
    let mut r = rng(seed);
    Volume::from_fn(dims, |_, _, _| r.random_range(0.0..1.0)).expect("nonempty dims")
}

pub fn features(channels: usize, dims: Dims, seed: u64) -> FeatureMap {
    let mut r = rng(seed);
    let mut f = FeatureMap::zeros(channels, dims);
    f.data.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    f
}

/// Smooth sinusoidal field with peak `amp` voxels.
pub fn field(dims: Dims, amp: f64) -> DisplacementField {
    DisplacementField::from_fn(dims, |i, j, k| {
        let (x, y, z) = (i as f64 * 0.3, j as f64 * 0.2, k as f64 * 0.25);
        [amp * (y + z).sin(), amp * (x - z).cos(), amp * (x + y).sin()]
    })
    .expect("nonempty dims")
}
