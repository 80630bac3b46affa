use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::{seeded, uniform};
use crate::tensor::Tensor;

const DATA_STREAM: u64 = 0x6461_7461_0000;

fn sq(v: f64) -> f64 {
    v * v
}

/// Procedural "faces": a filled ellipse with two dark eye dots on a
/// textured background, randomized per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticDatasetSpec {
    pub resolution: usize,
    pub n_images: usize,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn new(resolution: usize, n_images: usize, seed: u64) -> Self {
        Self {
            resolution,
            n_images,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 4 || self.n_images == 0 {
            return Err(Error::Config(
                "dataset needs resolution >= 4 and at least one image".into(),
            ));
        }
        Ok(())
    }

    /// Image `i`, `[3,R,R]` in `[-1,1]`. Depends only on `(seed, i)`.
    pub fn render(&self, i: usize) -> Tensor<f32> {
        let r = self.resolution;
        let rf = r as f64;
        let mut rng = seeded(self.seed, DATA_STREAM + i as u64);
        let bg: [f64; 3] = core::array::from_fn(|_| uniform(&mut rng, -0.8, -0.2));
        let (fx, fy) = (uniform(&mut rng, 0.2, 0.9), uniform(&mut rng, 0.2, 0.9));
        let phase = uniform(&mut rng, 0.0, core::f64::consts::TAU);
        let cx = rf / 2.0 + uniform(&mut rng, -rf / 8.0, rf / 8.0);
        let cy = rf / 2.0 + uniform(&mut rng, -rf / 8.0, rf / 8.0);
        let a = rf * uniform(&mut rng, 0.22, 0.32);
        let b = a * uniform(&mut rng, 1.1, 1.35);
        let face: [f64; 3] = core::array::from_fn(|_| uniform(&mut rng, 0.2, 0.8));
        let eye_r = (rf / 32.0 * uniform(&mut rng, 0.8, 1.2)).max(0.75);
        let eyes = [(cy - 0.25 * b, cx - 0.4 * a), (cy - 0.25 * b, cx + 0.4 * a)];
        let grain: Vec<f64> = (0..r * r).map(|_| uniform(&mut rng, -0.05, 0.05)).collect();

        let mut img = Tensor::zeros(&[3, r, r]);
        for h in 0..r {
            for w in 0..r {
                let (y, x) = (h as f64 + 0.5, w as f64 + 0.5);
                let texture = 0.1 * Float::sin(fx * x + fy * y + phase) + grain[h * r + w];
                let inside = sq((x - cx) / a) + sq((y - cy) / b) <= 1.0;
                let on_eye = eyes
                    .iter()
                    .any(|&(ey, ex)| sq(y - ey) + sq(x - ex) <= eye_r * eye_r);
                for c in 0..3 {
                    let v = if inside && on_eye {
                        -0.9
                    } else if inside {
                        face[c]
                    } else {
                        bg[c] + texture
                    };
                    img.channel_mut(c)[h * r + w] = v.clamp(-1.0, 1.0) as f32;
                }
            }
        }
        img
    }

    pub fn generate(&self) -> Vec<Tensor<f32>> {
        (0..self.n_images).map(|i| self.render(i)).collect()
    }
}
