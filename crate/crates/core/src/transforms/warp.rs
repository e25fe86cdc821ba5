//! Inverse-mapping bilinear warp with zero fill.

use super::homography::Homography;
use super::TransformError;
use crate::tensor::{Scalar, Tensor};

/// Source coordinates this close to a pixel center are snapped onto it, so
/// grid-preserving maps (identity, quarter turns) copy pixels exactly.
const SNAP: f64 = 1e-9;

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= SNAP {
        r
    } else {
        v
    }
}

/// Precomputed bilinear taps for each output pixel: four source offsets
/// (or `usize::MAX` for out-of-frame) and their weights.
struct Taps {
    idx: Vec<[usize; 4]>,
    w: Vec<[f64; 4]>,
}

fn build_taps(h: usize, w: usize, hom: &Homography) -> Result<Taps, TransformError> {
    let inv = hom.inverse()?;
    let mut idx = Vec::with_capacity(h * w);
    let mut wts = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = (2 * i + 1) as f64 / h as f64 - 1.0;
        for j in 0..w {
            let x = (2 * j + 1) as f64 / w as f64 - 1.0;
            let (px, py) = match inv.apply([x, y]) {
                Ok(s) => (snap(((s[0] + 1.0) * w as f64 - 1.0) / 2.0), snap(((s[1] + 1.0) * h as f64 - 1.0) / 2.0)),
                Err(_) => (f64::NAN, f64::NAN),
            };
            if !(px > -1.0 && px < w as f64 && py > -1.0 && py < h as f64) {
                idx.push([usize::MAX; 4]);
                wts.push([0.0; 4]);
                continue;
            }
            let (x0, y0) = (px.floor(), py.floor());
            let (fx, fy) = (px - x0, py - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let mut tap = [usize::MAX; 4];
            let weights = [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy];
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let (yy, xx) = (y0 + dy, x0 + dx);
                if weights[k] != 0.0 && yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                    tap[k] = yy as usize * w + xx as usize;
                }
            }
            idx.push(tap);
            wts.push(weights);
        }
    }
    Ok(Taps { idx, w: wts })
}

fn apply_taps<T: Scalar>(taps: &Taps, src: &[T], dst: &mut [T], channels: usize, plane: usize) {
    for c in 0..channels {
        let s = &src[c * plane..(c + 1) * plane];
        let d = &mut dst[c * plane..(c + 1) * plane];
        for (p, out) in d.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..4 {
                let t = taps.idx[p][k];
                if t != usize::MAX {
                    acc += taps.w[p][k] * s[t].as_f64();
                }
            }
            *out = T::from_f64_lossy(acc);
        }
    }
}

/// Warps a C×H×W image: each output pixel samples the input at `H⁻¹(p)`.
pub fn warp_image<T: Scalar>(img: &Tensor<T>, hom: &Homography) -> Result<Tensor<T>, TransformError> {
    let &[c, h, w] = img.shape() else {
        return Err(TransformError::ImageShape(img.shape().to_vec()));
    };
    let taps = build_taps(h, w, hom)?;
    let mut out = vec![T::zero(); img.numel()];
    apply_taps(&taps, img.data(), &mut out, c, h * w);
    Ok(Tensor::new(vec![c, h, w], out).expect("shape preserved"))
}

/// Warps each image of an N×C×H×W batch by its own homography.
pub fn warp_batch<T: Scalar>(batch: &Tensor<T>, homs: &[Homography]) -> Result<Tensor<T>, TransformError> {
    let &[n, c, h, w] = batch.shape() else {
        return Err(TransformError::ImageShape(batch.shape().to_vec()));
    };
    if homs.len() != n {
        return Err(TransformError::ImageShape(batch.shape().to_vec()));
    }
    let img = c * h * w;
    let mut out = vec![T::zero(); batch.numel()];
    for (k, hom) in homs.iter().enumerate() {
        let taps = build_taps(h, w, hom)?;
        apply_taps(&taps, &batch.data()[k * img..(k + 1) * img], &mut out[k * img..(k + 1) * img], c, h * w);
    }
    Ok(Tensor::new(batch.shape().to_vec(), out).expect("shape preserved"))
}
