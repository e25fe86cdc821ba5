//! Random geometric transformations of images and their regression targets.

mod homography;
mod sampler;
mod target;
mod warp;

pub use homography::{dlt_solve, has_collinear_triple, Homography, Point, CANONICAL_CORNERS};
pub use sampler::{sample_homography, sample_transform, Family, TransformParams, TransformPrior, MAX_RESAMPLE};
pub use target::{TargetStandardizer, TARGET_DIM};
pub use warp::{warp_batch, warp_image};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("homography is singular (det = {0:e})")]
    Singular(f64),
    #[error("point ({x}, {y}) maps to infinity")]
    PointAtInfinity { x: f64, y: f64 },
    #[error("degenerate correspondence: three corners are collinear")]
    Degenerate,
    #[error("invalid transform prior: {0}")]
    InvalidPrior(String),
    #[error("no non-degenerate transform after {0} attempts")]
    ResampleExhausted(usize),
    #[error("warp expects a C×H×W image, got shape {0:?}")]
    ImageShape(Vec<usize>),
}
