//! Central-difference verification of reverse-mode gradients.

use super::{AdjointFault, AutodiffError, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Corrupts one adjoint in the reverse pass (negative controls).
    pub fault: Option<AdjointFault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

/// Comparison for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct InputCheck {
    /// `max |analytic − numeric|` over the tensor, divided by the largest
    /// gradient magnitude seen in either route.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub non_finite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    /// Worst relative error; infinite if any value was non-finite.
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| if c.non_finite { f64::INFINITY } else { c.max_rel_err })
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| !c.non_finite && c.max_rel_err <= self.tolerance)
    }
}

/// Compare reverse-mode gradients of the scalar program `f` against central
/// differences, input by input.
///
/// `f` is evaluated on fresh graphs; it must be deterministic in its inputs.
pub fn grad_check<F, E>(mut f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut g = Graph::with_fault(cfg.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.data().to_vec(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    drop(g);

    let mut eval = |values: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut checks = Vec::with_capacity(inputs.len());
    for (idx, an) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; an.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[idx].data()[j];
            work[idx].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[idx].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[idx].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * cfg.step);
        }
        let non_finite = an.iter().chain(&numeric).any(|v| !v.is_finite());
        let max_abs_err = an.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = an.iter().chain(&numeric).map(|v| v.abs()).fold(0.0, f64::max);
        let max_rel_err = if scale > 1e-12 { max_abs_err / scale } else { max_abs_err };
        checks.push(InputCheck {
            max_rel_err,
            max_abs_err,
            non_finite,
        });
    }
    Ok(GradCheckReport {
        inputs: checks,
        tolerance: cfg.tolerance,
    })
}
