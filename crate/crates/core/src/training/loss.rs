//! Training objective: MSE to the population target plus activity and
//! weight-magnitude penalties.

use crate::error::{Error, Result};
use crate::network::Weights;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub mse: f64,
    /// Synaptic operations per sample.
    pub synops_penalty: f64,
    /// Sum over layers of the largest absolute kernel weight.
    pub weightmax_penalty: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(mse: f64, synops_penalty: f64, weightmax_penalty: f64, lambda_synops: f64, lambda_weightmax: f64) -> Self {
        Self {
            mse,
            synops_penalty,
            weightmax_penalty,
            total: mse + lambda_synops * synops_penalty + lambda_weightmax * weightmax_penalty,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.mse.is_finite()
    }
}

pub fn mse(output: &[f64], target: &[f64]) -> Result<f64> {
    if output.len() != target.len() {
        return Err(Error::LengthMismatch { left: output.len(), right: target.len() });
    }
    if output.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("loss input"));
    }
    Ok(output.iter().zip(target).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / output.len() as f64)
}

/// Gradient of [`mse`] with respect to `output`.
pub fn mse_grad(output: &[f64], target: &[f64]) -> Vec<f64> {
    let n = output.len() as f64;
    output.iter().zip(target).map(|(o, t)| 2.0 * (o - t) / n).collect()
}

pub fn weightmax_penalty(weights: &Weights) -> f64 {
    weights.layer_max_abs().iter().sum()
}

/// Subgradient of [`weightmax_penalty`]: `sign(w)` at the first largest
/// weight of every layer.
pub fn add_weightmax_grad(weights: &Weights, grads: &mut Weights, scale: f64) {
    for (lw, gw) in weights.layers.iter().zip(&mut grads.layers) {
        if lw.kernel.is_empty() {
            continue;
        }
        let mut best = 0;
        for (i, w) in lw.kernel.iter().enumerate() {
            if w.abs() > lw.kernel[best].abs() {
                best = i;
            }
        }
        let w = lw.kernel[best];
        if w != 0.0 {
            gw.kernel[best] += scale * w.signum();
        }
    }
}

/// Loss of one sample (synops given for that sample) or of a batch (synops
/// already averaged over the batch).
pub fn loss(
    output: &[f64],
    target: &[f64],
    synaptic_ops: f64,
    weights: &Weights,
    lambda_synops: f64,
    lambda_weightmax: f64,
) -> Result<LossBreakdown> {
    let m = mse(output, target)?;
    if !synaptic_ops.is_finite() {
        return Err(Error::NonFinite("synaptic operations"));
    }
    let w = weightmax_penalty(weights);
    if !w.is_finite() {
        return Err(Error::NonFinite("weights"));
    }
    Ok(LossBreakdown::new(m, synaptic_ops, w, lambda_synops, lambda_weightmax))
}
