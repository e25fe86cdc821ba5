//! Forward and adjoint kernels for the heavier operators.

use crate::tensor::{gemm, Scalar};

/// Geometry of one conv2d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_image(&self) -> usize {
        self.out_ch * self.out_plane()
    }

    /// 1×1, stride 1, no padding: the input image already is its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let chan = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back into an image gradient.
fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let chan = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let base = iy as usize * g.width;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            chan[base + ix as usize] = chan[base + ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernel: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * plane]
    };
    for n in 0..g.batch {
        let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let dst = &mut out[n * g.out_image()..(n + 1) * g.out_image()];
        for (o, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[o]);
        }
        let colm: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        gemm(false, false, g.out_ch, plane, g.col_rows(), T::one(), kernel, colm, T::one(), dst);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    dout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let mut d_input = need[0].then(|| vec![T::zero(); input.len()]);
    let mut d_kernel = need[1].then(|| vec![T::zero(); kernel.len()]);
    let mut d_bias = need[2].then(|| vec![T::zero(); g.out_ch]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * plane]
    };
    let mut dcols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.col_rows() * plane }];

    for n in 0..g.batch {
        let img = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let dy = &dout[n * g.out_image()..(n + 1) * g.out_image()];
        if let Some(db) = d_bias.as_mut() {
            for (o, chunk) in dy.chunks(plane).enumerate() {
                db[o] = db[o] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = d_kernel.as_mut() {
            let colm: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dK (O×CKK) += dY (O×P) · colsᵀ (P×CKK)
            gemm(false, true, g.out_ch, g.col_rows(), plane, T::one(), dy, colm, T::one(), dk);
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[n * g.in_image()..(n + 1) * g.in_image()];
            if g.is_pointwise() {
                gemm(true, false, g.col_rows(), plane, g.out_ch, T::one(), kernel, dy, T::one(), dst);
            } else {
                // dcols (CKK×P) = Kᵀ (CKK×O) · dY (O×P)
                gemm(true, false, g.col_rows(), plane, g.out_ch, T::one(), kernel, dy, T::zero(), &mut dcols);
                col2im(g, &dcols, dst);
            }
        }
    }
    ConvGrads {
        input: d_input,
        kernel: d_kernel,
        bias: d_bias,
    }
}

/// Per-channel statistics used by batch norm in both directions.
pub(crate) struct BnForward<T> {
    pub output: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// `channel_stats` supplies `(mean, var)` per channel; `None` means compute
/// biased batch statistics.
pub(crate) fn batch_norm_forward<T: Scalar>(
    x: &[T],
    dims: [usize; 4],
    gamma: &[T],
    beta: &[T],
    eps: T,
    fixed: Option<(&[T], &[T])>,
) -> BnForward<T> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = T::from_usize(n * plane).expect("count fits");
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut batch_mean = vec![T::zero(); c];
    let mut batch_var = vec![T::zero(); c];

    for ch in 0..c {
        let (mean, var) = match fixed {
            Some((m, v)) => (m[ch], v[ch]),
            None => {
                let mut s = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    s = s + x[off..off + plane].iter().copied().sum::<T>();
                }
                let mean = s / count;
                let mut ss = T::zero();
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for &v in &x[off..off + plane] {
                        ss = ss + (v - mean) * (v - mean);
                    }
                }
                (mean, ss / count)
            }
        };
        batch_mean[ch] = mean;
        batch_var[ch] = var;
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let xh = (x[i] - mean) * is;
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    BnForward {
        output: out,
        xhat,
        inv_std,
        batch_mean,
        batch_var,
    }
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    dy: &[T],
    dims: [usize; 4],
    gamma: &[T],
    xhat: &[T],
    inv_std: &[T],
    train: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let count = T::from_usize(n * plane).expect("count fits");
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sum_dy = sum_dy + dy[i];
                sum_dy_xhat = sum_dy_xhat + dy[i] * xhat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch];
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = if train {
                    scale / count * (count * dy[i] - sum_dy - xhat[i] * sum_dy_xhat)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
