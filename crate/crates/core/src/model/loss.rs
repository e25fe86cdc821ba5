//! Reparameterization, Gaussian likelihood of the transformation and the
//! per-batch training objective.

use rand::Rng;

use super::net::Model;
use super::{Mode, ModelError};
use crate::autodiff::{BnMode, Graph, RunningStats, Var};
use crate::tensor::{Scalar, Tensor};
use crate::transforms::{sample_homography, warp_batch, Homography, TargetStandardizer, TransformPrior, TARGET_DIM};

/// ln(2π).
pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// `mean + exp(logvar / 2) ∘ eps`.
pub fn reparameterize<T: Scalar>(g: &mut Graph<T>, mean: Var, logvar: Var, eps: Var) -> Result<Var, ModelError> {
    let half = g.mul_scalar(logvar, T::from_f64_lossy(0.5));
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    Ok(g.add(mean, noise)?)
}

/// Batch mean of `½ Σ_j [logvar_j + (t_j − d_j)² e^{−logvar_j} + ln 2π]`.
pub fn gaussian_nll<T: Scalar>(g: &mut Graph<T>, target: Var, d: Var, logvar: Var) -> Result<Var, ModelError> {
    let shape = g.shape(d).to_vec();
    let (n, dim) = (shape[0], shape.get(1).copied().unwrap_or(1));
    let r = g.sub(target, d)?;
    let sq = g.mul(r, r)?;
    let neg = g.mul_scalar(logvar, -T::one());
    let prec = g.exp(neg);
    let weighted = g.mul(sq, prec)?;
    let terms = g.add(logvar, weighted)?;
    let total = g.sum(terms);
    let scaled = g.mul_scalar(total, T::from_f64_lossy(0.5 / n as f64));
    Ok(g.add_scalar(scaled, T::from_f64_lossy(0.5 * dim as f64 * LOG_2PI)))
}

/// The same quantity on plain slices (row-major `n × dim`).
pub fn gaussian_nll_value(target: &[f64], d: &[f64], logvar: &[f64], dim: usize) -> f64 {
    let n = target.len() / dim;
    let mut s = 0.0;
    for i in 0..target.len() {
        let r = target[i] - d[i];
        s += logvar[i] + r * r * (-logvar[i]).exp() + LOG_2PI;
    }
    0.5 * s / n as f64
}

/// Differential entropy of a diagonal Gaussian with the given variances.
/// In standardized target space every variance is 1.
pub fn surrogate_entropy(variances: &[f64]) -> f64 {
    variances.iter().map(|v| 0.5 * (LOG_2PI + 1.0 + v.ln())).sum()
}

/// `H(t) + E[log q(t | z, z̃)]`, with `H(t)` from [`surrogate_entropy`].
/// Meaningful only up to the surrogate constant.
pub fn mi_lower_bound_estimate(avg_log_q: f64, entropy: f64) -> f64 {
    entropy + avg_log_q
}

/// Everything random in one training step, drawn up front so the loss
/// itself is a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct StepInputs<T: Scalar> {
    pub original: Tensor<T>,
    pub transformed: Tensor<T>,
    /// N×8 standardized targets.
    pub targets: Tensor<T>,
    /// Noise for the transformed branch (`z`); absent in AET mode.
    pub eps: Option<Tensor<T>>,
    /// Noise for the original branch (`z̃`).
    pub eps_tilde: Option<Tensor<T>>,
    pub homographies: Vec<Homography>,
}

/// Draws one transformation per image, warps, encodes targets and draws
/// the reparameterization noise.
pub fn sample_step_inputs<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    images: &Tensor<T>,
    prior: &TransformPrior,
    standardizer: &TargetStandardizer,
    latent: [usize; 3],
    mode: Mode,
) -> Result<StepInputs<T>, ModelError> {
    let n = images.shape()[0];
    let mut homs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n * TARGET_DIM);
    for _ in 0..n {
        let (_, h) = sample_homography(rng, prior)?;
        targets.extend(standardizer.encode(&h)?.iter().map(|&v| T::from_f64_lossy(v)));
        homs.push(h);
    }
    let transformed = warp_batch(images, &homs)?;
    let shape = [n, latent[0], latent[1], latent[2]];
    let (eps, eps_tilde) = match mode {
        Mode::Avt => (Some(Tensor::randn(shape, 1.0, rng)), Some(Tensor::randn(shape, 1.0, rng))),
        Mode::Aet => (None, None),
    };
    Ok(StepInputs {
        original: images.clone(),
        transformed,
        targets: Tensor::new([n, TARGET_DIM], targets).expect("n×8 targets"),
        eps,
        eps_tilde,
        homographies: homs,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LossOutput {
    pub loss: Var,
    pub d: Var,
    /// Decoder log-variance actually used by the likelihood.
    pub logvar: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossDiagnostics {
    pub loss: f64,
    /// Mean of `exp(logvar)` over the batch and target dims.
    pub mean_pred_var: f64,
    /// Mean Euclidean norm of `t − d`.
    pub residual_norm: f64,
}

impl LossOutput {
    pub fn diagnostics<T: Scalar>(&self, g: &Graph<T>, targets: &Tensor<T>) -> LossDiagnostics {
        let d = g.value(self.d).data();
        let lv = g.value(self.logvar).data();
        let t = targets.data();
        let n = targets.shape()[0].max(1);
        let mean_pred_var = lv.iter().map(|v| v.as_f64().exp()).sum::<f64>() / lv.len().max(1) as f64;
        let residual_norm = t
            .chunks(TARGET_DIM)
            .zip(d.chunks(TARGET_DIM))
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / n as f64;
        LossDiagnostics {
            loss: g.value(self.loss).item().as_f64(),
            mean_pred_var,
            residual_norm,
        }
    }
}

/// Batch-mean negative log-likelihood of the sampled transformations.
///
/// Both branches go through the encoder in one stacked pass (shared
/// weights). In AET mode the representations are the encoder means and the
/// decoder variance is fixed to 1.
pub fn avt_loss<T: Scalar>(
    model: &Model<T>,
    g: &mut Graph<T>,
    params: &[Var],
    bn: &mut [RunningStats<T>],
    inputs: &StepInputs<T>,
    mode: Mode,
    bn_mode: BnMode,
) -> Result<LossOutput, ModelError> {
    let n = inputs.original.shape()[0];
    let orig = g.constant(inputs.original.clone());
    let trans = g.constant(inputs.transformed.clone());
    let x = g.concat_rows(orig, trans)?;
    let enc = model.encode(g, params, bn, x, bn_mode, mode == Mode::Avt)?;
    let mean_o = g.slice_rows(enc.mean, 0, n)?;
    let mean_t = g.slice_rows(enc.mean, n, n)?;
    let (z, z_tilde) = match (mode, enc.logvar) {
        (Mode::Avt, Some(lv)) => {
            let (Some(eps), Some(eps_t)) = (&inputs.eps, &inputs.eps_tilde) else {
                return Err(ModelError::Config("AVT mode needs reparameterization noise".into()));
            };
            let lv_o = g.slice_rows(lv, 0, n)?;
            let lv_t = g.slice_rows(lv, n, n)?;
            let e = g.constant(eps.clone());
            let et = g.constant(eps_t.clone());
            (reparameterize(g, mean_t, lv_t, e)?, reparameterize(g, mean_o, lv_o, et)?)
        }
        _ => (mean_t, mean_o),
    };
    let (d, lv) = model.decode(g, params, bn, z, z_tilde, bn_mode)?;
    let lv = match mode {
        Mode::Avt => lv,
        Mode::Aet => g.constant(Tensor::zeros([n, TARGET_DIM])),
    };
    let t = g.constant(inputs.targets.clone());
    let loss = gaussian_nll(g, t, d, lv)?;
    if !g.value(loss).is_finite() {
        return Err(ModelError::NonFinite("transformation NLL".into()));
    }
    Ok(LossOutput { loss, d, logvar: lv })
}

#[cfg(test)]
mod tests;
