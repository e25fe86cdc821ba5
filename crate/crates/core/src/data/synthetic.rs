//! Procedural grayscale images of one to three convex polygons, lit from
//! above so that the images have an upright orientation.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Split};
use crate::tensor::Tensor;

const SUPERSAMPLE: usize = 4;
/// Illumination falls linearly from 1 at the top row to this at the bottom.
const BOTTOM_LIGHT: f64 = 0.5;

struct Polygon {
    verts: Vec<[f64; 2]>,
    intensity: f64,
}

impl Polygon {
    fn random<R: Rng>(rng: &mut R, size: f64) -> Self {
        let m = rng.gen_range(3..=6);
        let center = [rng.gen_range(0.2..0.8) * size, rng.gen_range(0.2..0.8) * size];
        let radii = [rng.gen_range(0.1..0.25) * size, rng.gen_range(0.1..0.25) * size];
        let tilt: f64 = rng.gen_range(0.0..TAU);
        let mut angles: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let (st, ct) = tilt.sin_cos();
        // Points on an ellipse taken in angular order bound a convex polygon.
        let verts = angles
            .iter()
            .map(|a| {
                let (x, y) = (radii[0] * a.cos(), radii[1] * a.sin());
                [center[0] + ct * x - st * y, center[1] + st * x + ct * y]
            })
            .collect();
        Polygon {
            verts,
            intensity: rng.gen_range(0.3..=1.0),
        }
    }

    fn contains(&self, p: [f64; 2]) -> bool {
        let n = self.verts.len();
        (0..n).all(|i| {
            let (a, b) = (self.verts[i], self.verts[(i + 1) % n]);
            (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
        })
    }
}

/// `n` images of `1×size×size` with label `polygon count − 1` (three
/// classes). A pure function of its arguments.
///
/// Without the lighting ramp the image distribution would be invariant to
/// quarter turns, and a single image would carry no cue about rotation.
pub fn gen_synthetic_shapes(seed: u64, n: usize, size: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut pixels = vec![0.0f64; n * plane];
    let mut labels = Vec::with_capacity(n);
    let step = 1.0 / SUPERSAMPLE as f64;
    for img in pixels.chunks_mut(plane) {
        let label = rng.gen_range(0..3usize);
        labels.push(label);
        img.fill(rng.gen_range(0.05..0.15));
        for _ in 0..=label {
            let poly = Polygon::random(&mut rng, size as f64);
            for i in 0..size {
                for j in 0..size {
                    let mut hits = 0;
                    for si in 0..SUPERSAMPLE {
                        for sj in 0..SUPERSAMPLE {
                            let p = [j as f64 + (sj as f64 + 0.5) * step, i as f64 + (si as f64 + 0.5) * step];
                            hits += poly.contains(p) as usize;
                        }
                    }
                    if hits > 0 {
                        let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                        let px = &mut img[i * size + j];
                        *px = cov * poly.intensity + (1.0 - cov) * *px;
                    }
                }
            }
        }
        for (i, row) in img.chunks_mut(size).enumerate() {
            let light = 1.0 - (1.0 - BOTTOM_LIGHT) * (i as f64 + 0.5) / size as f64;
            row.iter_mut().for_each(|v| *v *= light);
        }
    }
    let images = Tensor::new([n, 1, size, size], pixels).expect("synthetic layout");
    Dataset::new(images, Some(labels), 3, Split::Train).expect("labels in range")
}
