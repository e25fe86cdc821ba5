//! Eight-dimensional regression target: standardized corner displacements.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::homography::{dlt_solve, Homography, Point, CANONICAL_CORNERS};
use super::sampler::{sample_homography, TransformPrior};
use super::TransformError;

pub const TARGET_DIM: usize = 8;

/// Per-dimension affine standardization of corner displacements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetStandardizer {
    pub mean: [f64; TARGET_DIM],
    pub scale: [f64; TARGET_DIM],
}

impl Default for TargetStandardizer {
    fn default() -> Self {
        TargetStandardizer {
            mean: [0.0; TARGET_DIM],
            scale: [1.0; TARGET_DIM],
        }
    }
}

fn displacements(h: &Homography) -> Result<[f64; TARGET_DIM], TransformError> {
    let mut d = [0.0; TARGET_DIM];
    for (k, c) in CANONICAL_CORNERS.iter().enumerate() {
        let p = h.apply(*c)?;
        d[2 * k] = p[0] - c[0];
        d[2 * k + 1] = p[1] - c[1];
    }
    Ok(d)
}

impl TargetStandardizer {
    /// Estimates mean and standard deviation of the raw displacements from
    /// `draws` samples of `prior`. Dimensions with no spread keep scale 1.
    pub fn calibrate(prior: &TransformPrior, draws: usize, seed: u64) -> Result<Self, TransformError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = [0.0f64; TARGET_DIM];
        let mut sumsq = [0.0f64; TARGET_DIM];
        for _ in 0..draws {
            let (_, h) = sample_homography(&mut rng, prior)?;
            let d = displacements(&h)?;
            for k in 0..TARGET_DIM {
                sum[k] += d[k];
                sumsq[k] += d[k] * d[k];
            }
        }
        let n = draws.max(1) as f64;
        let mut out = TargetStandardizer::default();
        for k in 0..TARGET_DIM {
            let mean = sum[k] / n;
            let var = (sumsq[k] / n - mean * mean).max(0.0);
            out.mean[k] = if mean.abs() < 1e-15 { 0.0 } else { mean };
            out.scale[k] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        Ok(out)
    }

    /// `homography_to_target`: standardized displacements of the canonical corners.
    pub fn encode(&self, h: &Homography) -> Result<[f64; TARGET_DIM], TransformError> {
        let mut d = displacements(h)?;
        for k in 0..TARGET_DIM {
            d[k] = (d[k] - self.mean[k]) / self.scale[k];
        }
        Ok(d)
    }

    /// `target_to_homography`: undo the standardization and refit by DLT.
    pub fn decode(&self, v: &[f64; TARGET_DIM]) -> Result<Homography, TransformError> {
        let mut dst: [Point; 4] = CANONICAL_CORNERS;
        for (k, p) in dst.iter_mut().enumerate() {
            p[0] += v[2 * k] * self.scale[2 * k] + self.mean[2 * k];
            p[1] += v[2 * k + 1] * self.scale[2 * k + 1] + self.mean[2 * k + 1];
        }
        dlt_solve(&CANONICAL_CORNERS, &dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::Family;

    #[test]
    fn identity_encodes_to_standardized_zero() {
        let s = TargetStandardizer {
            mean: [0.1, -0.2, 0.0, 0.3, 0.0, 0.0, 0.5, 0.0],
            scale: [2.0; TARGET_DIM],
        };
        let t = s.encode(&Homography::IDENTITY).unwrap();
        for k in 0..TARGET_DIM {
            assert_eq!(t[k], -s.mean[k] / 2.0);
        }
    }

    #[test]
    fn round_trip_on_sampler_outputs() {
        let prior = TransformPrior::default();
        let s = TargetStandardizer::calibrate(&prior, 2000, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let (_, h) = sample_homography(&mut rng, &prior).unwrap();
            let back = s.decode(&s.encode(&h).unwrap()).unwrap();
            assert!(back.max_entry_diff(&h) < 1e-9, "{h:?} vs {back:?}");
        }
    }

    #[test]
    fn calibration_standardizes_fresh_draws() {
        let prior = TransformPrior::default();
        let s = TargetStandardizer::calibrate(&prior, 100_000, 20190411).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let n = 100_000;
        let mut sum = [0.0f64; TARGET_DIM];
        let mut sumsq = [0.0f64; TARGET_DIM];
        for _ in 0..n {
            let (_, h) = sample_homography(&mut rng, &prior).unwrap();
            let t = s.encode(&h).unwrap();
            for k in 0..TARGET_DIM {
                sum[k] += t[k];
                sumsq[k] += t[k] * t[k];
            }
        }
        for k in 0..TARGET_DIM {
            let mean = sum[k] / n as f64;
            let sd = (sumsq[k] / n as f64 - mean * mean).sqrt();
            assert!(mean.abs() < 0.02, "dim {k}: mean {mean}");
            assert!((0.9..=1.1).contains(&sd), "dim {k}: sd {sd}");
        }
    }

    #[test]
    fn identity_family_calibrates_to_unit_scale() {
        let s = TargetStandardizer::calibrate(&TransformPrior::identity(), 100, 1).unwrap();
        assert_eq!(s, TargetStandardizer::default());
        let affine = TransformPrior {
            family: Family::Affine,
            ..TransformPrior::default()
        };
        let s = TargetStandardizer::calibrate(&affine, 5000, 1).unwrap();
        assert!(s.scale.iter().all(|&v| v > 0.1));
    }

    #[test]
    fn decode_rejects_collapsed_corners() {
        let s = TargetStandardizer::default();
        // Move every corner onto the origin.
        let v = [1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0];
        assert_eq!(s.decode(&v), Err(TransformError::Degenerate));
    }
}
