//! Seeded inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semflow_core::{FeatureMap, FlowField, Mask};

pub fn random_features(h: usize, w: usize, d: usize, seed: u64) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::new(h, w, d, (0..h * w * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("sized")
}

pub fn random_flow(h: usize, w: usize, amp: f64, seed: u64) -> FlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowField::from_fn(h, w, |_, _| [rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)])
}

pub fn random_mask(h: usize, w: usize, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mask::from_fn(h, w, |_, _| rng.gen_bool(0.5))
}
