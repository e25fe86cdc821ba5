//! The prior p(t) over transformations and its sampler.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::homography::{dlt_solve, Homography, CANONICAL_CORNERS};
use super::TransformError;

/// Attempts before giving up on drawing non-degenerate corners.
pub const MAX_RESAMPLE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Corner jitter on top of scale and rotation (8 degrees of freedom).
    Projective,
    /// Scale, rotation, shear and translation.
    Affine,
    Identity,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Projective => "projective",
            Family::Affine => "affine",
            Family::Identity => "identity",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = TransformError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "projective" => Ok(Family::Projective),
            "affine" => Ok(Family::Affine),
            "identity" => Ok(Family::Identity),
            other => Err(TransformError::InvalidPrior(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformPrior {
    /// Largest corner (or translation) offset as a fraction of the image extent.
    pub jitter_max: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Rotation angles in degrees, drawn uniformly.
    pub rotations: Vec<f64>,
    /// Largest horizontal shear angle for the affine family.
    pub shear_max_deg: f64,
    pub family: Family,
}

impl Default for TransformPrior {
    fn default() -> Self {
        TransformPrior {
            jitter_max: 0.125,
            scale_min: 0.8,
            scale_max: 1.2,
            rotations: vec![0.0, 90.0, 180.0, 270.0],
            shear_max_deg: 30.0,
            family: Family::Projective,
        }
    }
}

impl TransformPrior {
    /// A prior whose only draw is the identity.
    pub fn identity() -> Self {
        TransformPrior {
            jitter_max: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            rotations: vec![0.0],
            shear_max_deg: 0.0,
            family: Family::Identity,
        }
    }

    pub fn validate(&self) -> Result<(), TransformError> {
        let bad = |m: String| Err(TransformError::InvalidPrior(m));
        if !(self.jitter_max >= 0.0 && self.jitter_max < 0.5) {
            return bad(format!("jitter_max must be in [0, 0.5), got {}", self.jitter_max));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return bad(format!("scale range [{}, {}] is invalid", self.scale_min, self.scale_max));
        }
        if self.rotations.is_empty() || self.rotations.iter().any(|r| !r.is_finite()) {
            return bad("rotation set must be non-empty and finite".into());
        }
        if !(self.shear_max_deg >= 0.0 && self.shear_max_deg < 80.0) {
            return bad(format!("shear_max_deg must be in [0, 80), got {}", self.shear_max_deg));
        }
        Ok(())
    }
}

/// Generator parameters of one transformation. Offsets are fractions of the
/// image extent; fields the family does not use stay at their neutral value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub scale: f64,
    pub rotation_deg: f64,
    /// `(dx, dy)` for each canonical corner.
    pub corner_jitter: [f64; 8],
    pub shear_deg: f64,
    pub translation: [f64; 2],
}

impl TransformParams {
    pub const IDENTITY: TransformParams = TransformParams {
        scale: 1.0,
        rotation_deg: 0.0,
        corner_jitter: [0.0; 8],
        shear_deg: 0.0,
        translation: [0.0; 2],
    };

    /// Checks the parameters against the ranges of `prior`.
    pub fn within(&self, prior: &TransformPrior) -> bool {
        let in_range = |v: f64, m: f64| v.abs() <= m;
        self.scale >= prior.scale_min
            && self.scale <= prior.scale_max
            && prior.rotations.contains(&self.rotation_deg)
            && self.corner_jitter.iter().all(|&v| in_range(v, prior.jitter_max))
            && self.translation.iter().all(|&v| in_range(v, prior.jitter_max))
            && in_range(self.shear_deg, prior.shear_max_deg)
    }

    /// `translate · jitter · rotate · shear · scale` in normalized coordinates.
    /// A fraction `f` of the extent is `2f` in normalized units.
    pub fn to_homography(&self) -> Result<Homography, TransformError> {
        let mut dst = CANONICAL_CORNERS;
        for (k, p) in dst.iter_mut().enumerate() {
            p[0] += 2.0 * self.corner_jitter[2 * k];
            p[1] += 2.0 * self.corner_jitter[2 * k + 1];
        }
        let jitter = if self.corner_jitter.iter().all(|&v| v == 0.0) {
            Homography::IDENTITY
        } else {
            dlt_solve(&CANONICAL_CORNERS, &dst)?
        };
        let h = Homography::translation(2.0 * self.translation[0], 2.0 * self.translation[1])
            .compose(&jitter)
            .compose(&Homography::rotation_deg(self.rotation_deg))
            .compose(&Homography::shear_deg(self.shear_deg))
            .compose(&Homography::scaling(self.scale));
        Homography::from_matrix(h.matrix())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// One independent draw from `prior`.
pub fn sample_transform<R: Rng + ?Sized>(rng: &mut R, prior: &TransformPrior) -> TransformParams {
    let mut p = TransformParams::IDENTITY;
    if prior.family == Family::Identity {
        return p;
    }
    p.scale = uniform(rng, prior.scale_min, prior.scale_max);
    p.rotation_deg = prior.rotations[rng.gen_range(0..prior.rotations.len())];
    let j = prior.jitter_max;
    match prior.family {
        Family::Projective => {
            for v in &mut p.corner_jitter {
                *v = uniform(rng, -j, j);
            }
        }
        Family::Affine => {
            p.shear_deg = uniform(rng, -prior.shear_max_deg, prior.shear_max_deg);
            p.translation = [uniform(rng, -j, j), uniform(rng, -j, j)];
        }
        Family::Identity => unreachable!(),
    }
    p
}

/// Draws parameters and builds their homography, resampling degenerate draws.
pub fn sample_homography<R: Rng + ?Sized>(
    rng: &mut R,
    prior: &TransformPrior,
) -> Result<(TransformParams, Homography), TransformError> {
    prior.validate()?;
    for _ in 0..MAX_RESAMPLE {
        let p = sample_transform(rng, prior);
        match p.to_homography() {
            Ok(h) => return Ok((p, h)),
            Err(TransformError::Degenerate | TransformError::Singular(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(TransformError::ResampleExhausted(MAX_RESAMPLE))
}
