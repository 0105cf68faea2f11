//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xsl_core::scenegen::{quadrant_origin, SCENE_PIXELS, SCENE_SIDE};

/// `n` scenes with `k` stroke-filled quadrants each and a matching-sized
/// caption of distinct words.
pub fn scenes(n: usize, k: usize, seed: u64) -> Vec<(Vec<f32>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut s = vec![0.0f32; SCENE_PIXELS];
            for q in 0..k {
                let (r0, c0) = quadrant_origin(q);
                for r in r0 + 4..r0 + 24 {
                    for c in c0 + 4..c0 + 24 {
                        if rng.random::<f32>() < 0.3 {
                            s[r * SCENE_SIDE + c] = rng.random();
                        }
                    }
                }
            }
            let caption = rand::seq::index::sample(&mut rng, 10, k).into_iter().map(|w| w as u8).collect();
            (s, caption)
        })
        .collect()
}

pub fn uniform(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}
