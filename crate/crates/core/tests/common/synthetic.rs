//! Synthetic tiles: one bright square on a dark, slightly noisy background.

use dualskip_core::data::{Raster, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn squares(count: usize, size: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let side = rng.gen_range(size / 4..=size / 2);
            let (top, left) = (rng.gen_range(0..=size - side), rng.gen_range(0..=size - side));
            let mut image = vec![0u8; size * size * 3];
            let mut mask = vec![0u8; size * size];
            for y in 0..size {
                for x in 0..size {
                    let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
                    mask[y * size + x] = inside as u8;
                    for c in 0..3 {
                        image[(y * size + x) * 3 + c] = if inside { 200 } else { 40 } + rng.gen_range(0..20);
                    }
                }
            }
            Sample {
                image: Raster::new(size, size, 3, image).unwrap(),
                mask: Raster::new(size, size, 1, mask).unwrap(),
                name: format!("square{i}"),
            }
        })
        .collect()
}
