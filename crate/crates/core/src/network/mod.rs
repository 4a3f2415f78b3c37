//! Layer stacks, their weights and execution.

pub(crate) mod engine;
mod spec;
mod weights;

pub use engine::{Activity, ExecOptions, ForwardTrace, TraceLayer};
pub use spec::{
    Activation, LayerKind, LayerSpec, NetworkSpec, Profile, Shape, IF_THRESHOLD, LIF_DECAY, LIF_THRESHOLD,
    QRELU_BITS, QRELU_DEFAULT_RANGE,
};
pub use weights::{kernel_geometry, BatchNorm, LayerWeights, Model, Weights, BN_EPS};

use crate::error::Result;

/// Runs the network for `spec.steps` steps on a constant input and returns
/// the output rates (mean output per step) with the per-layer trace.
pub fn forward(spec: &NetworkSpec, weights: &Weights, input: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
    forward_with(spec, weights, input, ExecOptions::inference(spec.steps))
}

pub fn forward_with(spec: &NetworkSpec, weights: &Weights, input: &[f64], opts: ExecOptions) -> Result<(Vec<f64>, ForwardTrace)> {
    let pass = engine::run(spec, weights, input, ExecOptions { record: false, ..opts })?;
    Ok((pass.rates(), pass.trace))
}

/// Single-step evaluation with every multi-spike IF layer replaced by
/// `ReLU(x) / θ`, the limit its spike rate approaches.
pub fn forward_ann(spec: &NetworkSpec, weights: &Weights, input: &[f64]) -> Result<Vec<f64>> {
    let opts = ExecOptions { steps: 1, ann: true, float_activations: false, record: false };
    Ok(engine::run(spec, weights, input, opts)?.rates())
}

impl Model {
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardTrace)> {
        forward(&self.spec, &self.weights, input)
    }
}
