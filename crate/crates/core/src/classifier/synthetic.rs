//! Synthetic, linearly separable segment task used to sanity-check training.
//!
//! Every image is uniform noise in [0, 0.1); positives additionally carry a
//! bright 16×16 block (values in [0.85, 1.0)) at a random position.

use rand::{Rng, RngExt};

use super::Example;
use crate::imaging::GrayImage;
use crate::rng;

pub const BLOCK: usize = 16;
pub const NOISE_MAX: f64 = 0.1;

pub fn segment_image<R: Rng>(rng: &mut R, with_block: bool) -> GrayImage {
    let (w, h) = (128, 64);
    let mut data: Vec<f64> = (0..w * h).map(|_| rng.random_range(0.0..NOISE_MAX)).collect();
    if with_block {
        let x0 = rng.random_range(0..=w - BLOCK);
        let y0 = rng.random_range(0..=h - BLOCK);
        for y in y0..y0 + BLOCK {
            for x in x0..x0 + BLOCK {
                data[y * w + x] = rng.random_range(0.85..1.0);
            }
        }
    }
    GrayImage::new(w, h, data)
}

/// `n` examples with alternating labels, starting with a positive.
pub fn separable_task(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = rng::seeded(seed);
    (0..n)
        .map(|i| {
            let label = u8::from(i % 2 == 0);
            Example::from_segment(&segment_image(&mut rng, label == 1), label).expect("synthetic segment is 64x128")
        })
        .collect()
}
