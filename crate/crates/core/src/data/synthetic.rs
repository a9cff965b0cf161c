//! Seeded synthetic dataset: one or two soft-edged ellipses on a noisy
//! background, with the thresholded ellipse union as the mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{Image, Mask, SampleRecord};
use crate::error::Result;

pub const DATASET_ID: &str = "synthetic-blobs";

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalised radius; 1 on the boundary.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

/// Sample `index` of the blob dataset with `size x size` rasters.
pub fn blob_sample(seed: u64, index: u64, size: usize) -> Result<SampleRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as f64;
    let count = rng.random_range(1..=2);
    let ellipses: Vec<Ellipse> = (0..count)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Ellipse {
                cy: rng.random_range(0.3 * s..0.7 * s),
                cx: rng.random_range(0.3 * s..0.7 * s),
                ry: rng.random_range(0.12 * s..0.25 * s),
                rx: rng.random_range(0.12 * s..0.25 * s),
                cos: angle.cos(),
                sin: angle.sin(),
            }
        })
        .collect();
    let bg: [f64; 3] = [0.2, 0.3, 0.5].map(|c| c + rng.random_range(-0.08..0.08));
    let fg: [f64; 3] = [0.85, 0.45, 0.3].map(|c| c + rng.random_range(-0.08..0.08));
    let edge = 0.08 * s;
    let mut radius = vec![f64::INFINITY; size * size];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            radius[y * size + x] = ellipses.iter().map(|e| e.radius(py, px)).fold(f64::INFINITY, f64::min);
        }
    }
    let noise: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(-0.04..0.04)).collect();
    let image = Image::from_fn(size, size, |c, y, x| {
        let r = radius[y * size + x];
        let soft = 1.0 / (1.0 + ((r - 1.0) * edge).exp());
        let v = bg[c] * (1.0 - soft) + fg[c] * soft + noise[c * size * size + y * size + x];
        v.clamp(0.0, 1.0) as f32
    })?;
    let mask = Mask::from_fn(size, size, |y, x| radius[y * size + x] < 1.0);
    SampleRecord::new(image, mask, DATASET_ID, None, format!("blob_{index:04}.png"))
}

pub fn blobs(n: usize, seed: u64, size: usize) -> Result<Vec<SampleRecord>> {
    (0..n as u64).map(|i| blob_sample(seed, i, size)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_nonempty() {
        let a = blobs(4, 7, 64).unwrap();
        let b = blobs(4, 7, 64).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(!s.mask.is_empty());
            assert!(s.mask.foreground_count() < 64 * 64 / 2 + 64 * 64 / 4);
        }
        assert_ne!(a[0].mask, a[1].mask);
        assert_ne!(blobs(1, 8, 64).unwrap()[0], a[0]);
    }
}
