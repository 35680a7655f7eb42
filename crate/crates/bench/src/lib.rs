//! Shared fixtures for the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unipre3d_core::gradcheck::random_instance;
use unipre3d_core::{Camera, GaussianSet, ImageTensor};

/// A seeded random splat scene: primitives, camera, upstream image gradient, background.
pub fn scene(n: usize, size: usize, seed: u64) -> (GaussianSet, Camera, ImageTensor, [f64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_instance(&mut rng, n, size).expect("random scene")
}
