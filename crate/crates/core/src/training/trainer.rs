use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::Adam;
use super::config::TrainConfig;
use super::loss::{add_weightmax_grad, mse, mse_grad, weightmax_penalty, LossBreakdown};
use super::target::encode_target;
use crate::decode::{argmax, distance};
use crate::deploy::{quantize_kernel, quantize_weights};
use crate::error::{Error, Result};
use crate::event_pipeline::LabeledSample;
use crate::network::engine::{self, BnStats, ExecOptions};
use crate::network::{Activation, NetworkSpec, Weights, BN_EPS};
use crate::ROI_SIDE;

/// Samples per work unit. Partial gradients are summed in chunk order, so
/// results do not depend on the number of threads.
const CHUNK: usize = 8;
const BN_MOMENTUM: f64 = 0.1;
const BN_CALIBRATION_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Trained weights. Quantization-aware training returns the folded,
    /// quantized deployment set.
    pub weights: Weights,
    /// Mean training loss of every epoch, measured while it ran.
    pub history: Vec<LossBreakdown>,
    /// Mean pixel error on the validation set after every epoch; empty
    /// without validation data.
    pub val_error: Vec<f64>,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
}

fn uses_quantized_relu(spec: &NetworkSpec) -> bool {
    spec.layers.iter().any(|l| matches!(l.activation, Some(Activation::QuantizedRelu { .. })))
}

/// Surrogate-gradient BPTT from a fresh initialization.
pub fn train_bptt(spec: &NetworkSpec, data: &[LabeledSample], config: &TrainConfig) -> Result<TrainOutcome> {
    if uses_quantized_relu(spec) {
        return Err(Error::InvalidArgument("quantized ReLU networks train with train_qat".into()));
    }
    fit(spec, Weights::init(spec, config.seed)?, data, None, config)
}

/// Quantization-aware training from a fresh initialization.
pub fn train_qat(spec: &NetworkSpec, data: &[LabeledSample], config: &TrainConfig) -> Result<TrainOutcome> {
    if !uses_quantized_relu(spec) {
        return Err(Error::InvalidArgument("train_qat expects a quantized ReLU network".into()));
    }
    fit(spec, Weights::init(spec, config.seed)?, data, None, config)
}

/// Trains `initial` on `train`, choosing BPTT or quantization-aware
/// training from the network's activations. With validation data the
/// weights of the epoch with the lowest validation error are returned and
/// `config.patience` can stop training early.
pub fn fit(
    spec: &NetworkSpec,
    initial: Weights,
    train: &[LabeledSample],
    val: Option<&[LabeledSample]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    initial.check(spec)?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let qat = uses_quantized_relu(spec);
    let mut shadow = initial;
    if qat {
        calibrate_batchnorm(spec, &mut shadow, train)?;
    }
    let mut adam = Adam::new(config.adam, &shadow);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_7a11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let opts = ExecOptions { steps: spec.steps, ann: false, float_activations: false, record: true };

    let mut history = Vec::with_capacity(config.epochs);
    let mut val_error = Vec::new();
    let mut best: Option<(f64, usize, Weights)> = None;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let epoch_config = TrainConfig { lambda_synops: config.lambda_synops_at(epoch), ..config.clone() };
        let mut sums = (0.0, 0.0, 0.0);
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<&LabeledSample> = batch_idx.iter().map(|&i| &train[i]).collect();
            let effective = if qat { fake_quantize(spec, &shadow)? } else { shadow.clone() };
            let mut step = batch_gradient(spec, &effective, &batch, &epoch_config, opts)?;
            let wmax = weightmax_penalty(&shadow);
            add_weightmax_grad(&shadow, &mut step.grads, config.lambda_weightmax);
            let b = batch.len() as f64;
            let loss =
                LossBreakdown::new(step.mse_sum / b, step.synops_sum / b, wmax, epoch_config.lambda_synops, config.lambda_weightmax);
            if !loss.is_finite() || !step.grads.trainable().iter().all(|t| t.iter().all(|v| v.is_finite())) {
                return Err(Error::Divergence { epoch });
            }
            sums.0 += step.mse_sum;
            sums.1 += step.synops_sum;
            sums.2 += wmax * b;
            adam.step(&mut shadow, &step.grads);
            update_running_stats(&mut shadow, &step.bn);
        }
        let n = train.len() as f64;
        history.push(LossBreakdown::new(sums.0 / n, sums.1 / n, sums.2 / n, epoch_config.lambda_synops, config.lambda_weightmax));

        if let Some(val) = val.filter(|v| !v.is_empty()) {
            let effective = if qat { fake_quantize(spec, &shadow)? } else { shadow.clone() };
            let err = mean_local_error(spec, &effective, val)?;
            val_error.push(err);
            if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
                best = Some((err, epoch, shadow.clone()));
            }
            let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
            if config.patience.is_some_and(|p| epoch - best_epoch >= p) {
                break;
            }
        }
    }

    let (best_epoch, shadow) = match best {
        Some((_, e, w)) => (e, w),
        None => (history.len().saturating_sub(1), shadow),
    };
    let weights = if qat { deployment_weights(spec, &shadow)? } else { shadow };
    Ok(TrainOutcome { weights, history, val_error, best_epoch })
}

/// Folds batch norm and quantizes kernels to `spec.weight_bits`.
pub fn deployment_weights(spec: &NetworkSpec, weights: &Weights) -> Result<Weights> {
    let folded = weights.fold_batchnorm(spec)?;
    Ok(quantize_weights(&folded, spec.weight_bits)?.weights)
}

/// Kernels as the deployed network will see them: the kernel scaled by
/// its batch-norm factor is quantized, then the factor is divided back
/// out so the forward pass still applies batch norm separately.
fn fake_quantize(spec: &NetworkSpec, shadow: &Weights) -> Result<Weights> {
    let mut eff = shadow.clone();
    for lw in &mut eff.layers {
        if lw.kernel.is_empty() {
            continue;
        }
        let scale: Vec<f64> = match &lw.bn {
            Some(bn) => bn.gamma.iter().zip(&bn.var).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect(),
            None => vec![1.0],
        };
        let per = lw.kernel.len() / scale.len();
        let folded: Vec<f64> = lw.kernel.iter().enumerate().map(|(i, w)| w * scale[i / per]).collect();
        let (q, _) = quantize_kernel(&folded, spec.weight_bits)?;
        for (i, w) in lw.kernel.iter_mut().enumerate() {
            let s = scale[i / per];
            if s != 0.0 {
                *w = q[i] / s;
            }
        }
    }
    Ok(eff)
}

/// Summed gradient and loss terms of a batch. Gradients are already
/// divided by the batch size.
#[derive(Debug)]
pub(crate) struct BatchStep {
    pub grads: Weights,
    pub mse_sum: f64,
    pub synops_sum: f64,
    pub bn: Vec<Option<BnStats>>,
}

fn sample_step(
    spec: &NetworkSpec,
    weights: &Weights,
    sample: &LabeledSample,
    config: &TrainConfig,
    opts: ExecOptions,
    batch: f64,
) -> Result<BatchStep> {
    let target = encode_target(sample.truth_local)?;
    let pass = engine::run(spec, weights, &sample.frame.to_input(), opts)?;
    let rates = pass.rates();
    let m = mse(&rates, &target)?;
    let rows = pass.output.nrows();
    let g = mse_grad(&rates, &target);
    let d_output = ndarray::Array2::from_shape_fn((rows, g.len()), |(_, j)| g[j] / (rows as f64 * batch));
    let grads = engine::backward(spec, weights, &pass, d_output, config.lambda_synops / batch, config.gamma)?;
    Ok(BatchStep { grads, mse_sum: m, synops_sum: pass.trace.synaptic_ops as f64, bn: pass.bn_stats })
}

fn merge(acc: &mut BatchStep, other: BatchStep) {
    acc.grads.add_scaled(&other.grads, 1.0);
    acc.mse_sum += other.mse_sum;
    acc.synops_sum += other.synops_sum;
    for (a, b) in acc.bn.iter_mut().zip(other.bn) {
        if let (Some(a), Some(b)) = (a.as_mut(), b) {
            a.sum.iter_mut().zip(&b.sum).for_each(|(x, y)| *x += y);
            a.sum_sq.iter_mut().zip(&b.sum_sq).for_each(|(x, y)| *x += y);
            a.count += b.count;
        }
    }
}

pub(crate) fn batch_gradient(
    spec: &NetworkSpec,
    weights: &Weights,
    batch: &[&LabeledSample],
    config: &TrainConfig,
    opts: ExecOptions,
) -> Result<BatchStep> {
    let b = batch.len() as f64;
    let partials: Vec<Result<BatchStep>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc: Option<BatchStep> = None;
            for s in chunk {
                let step = sample_step(spec, weights, s, config, opts, b)?;
                match acc.as_mut() {
                    None => acc = Some(step),
                    Some(a) => merge(a, step),
                }
            }
            Ok(acc.expect("chunks are non-empty"))
        })
        .collect();
    let mut total: Option<BatchStep> = None;
    for p in partials {
        let p = p?;
        match total.as_mut() {
            None => total = Some(p),
            Some(t) => merge(t, p),
        }
    }
    total.ok_or(Error::EmptyDataset)
}

/// Loss and exact gradient of the batch objective at `weights`, without
/// weight quantization. With `float_activations` quantized ReLUs are
/// evaluated unrounded so the result can be compared with finite
/// differences.
pub fn loss_and_gradient(
    spec: &NetworkSpec,
    weights: &Weights,
    samples: &[LabeledSample],
    config: &TrainConfig,
    float_activations: bool,
) -> Result<(LossBreakdown, Weights)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let opts = ExecOptions { steps: spec.steps, ann: false, float_activations, record: true };
    let batch: Vec<&LabeledSample> = samples.iter().collect();
    let mut step = batch_gradient(spec, weights, &batch, config, opts)?;
    add_weightmax_grad(weights, &mut step.grads, config.lambda_weightmax);
    let b = samples.len() as f64;
    let loss = LossBreakdown::new(
        step.mse_sum / b,
        step.synops_sum / b,
        weightmax_penalty(weights),
        config.lambda_synops,
        config.lambda_weightmax,
    );
    Ok((loss, step.grads))
}

fn update_running_stats(weights: &mut Weights, stats: &[Option<BnStats>]) {
    for (lw, st) in weights.layers.iter_mut().zip(stats) {
        let (Some(bn), Some(st)) = (lw.bn.as_mut(), st) else { continue };
        for c in 0..bn.mean.len() {
            let mean = st.sum[c] / st.count;
            let var = (st.sum_sq[c] / st.count - mean * mean).max(0.0);
            bn.mean[c] = (1.0 - BN_MOMENTUM) * bn.mean[c] + BN_MOMENTUM * mean;
            bn.var[c] = (1.0 - BN_MOMENTUM) * bn.var[c] + BN_MOMENTUM * var;
        }
    }
}

/// Sets batch-norm statistics layer by layer from the first samples so
/// training starts from normalized activations.
fn calibrate_batchnorm(spec: &NetworkSpec, weights: &mut Weights, data: &[LabeledSample]) -> Result<()> {
    let calib = &data[..data.len().min(BN_CALIBRATION_SAMPLES)];
    let inputs: Vec<Vec<f64>> = calib.iter().map(|s| s.frame.to_input()).collect();
    let opts = ExecOptions::inference(spec.steps);
    for i in 0..weights.layers.len() {
        if weights.layers[i].bn.is_none() {
            continue;
        }
        let mut sum: Option<BnStats> = None;
        for input in &inputs {
            let pass = engine::run(spec, weights, input, opts)?;
            let st = pass.bn_stats[i].clone().expect("layer has batch norm");
            match sum.as_mut() {
                None => sum = Some(st),
                Some(a) => {
                    a.sum.iter_mut().zip(&st.sum).for_each(|(x, y)| *x += y);
                    a.sum_sq.iter_mut().zip(&st.sum_sq).for_each(|(x, y)| *x += y);
                    a.count += st.count;
                }
            }
        }
        let st = sum.expect("calibration set is non-empty");
        let bn = weights.layers[i].bn.as_mut().expect("checked above");
        for c in 0..bn.mean.len() {
            let mean = st.sum[c] / st.count;
            bn.mean[c] = mean;
            bn.var[c] = (st.sum_sq[c] / st.count - mean * mean).max(0.0);
        }
    }
    Ok(())
}

/// Euclidean distance between decoded and true ROI-local positions, one
/// entry per sample.
pub fn local_errors(spec: &NetworkSpec, weights: &Weights, data: &[LabeledSample]) -> Result<Vec<f64>> {
    data.par_iter()
        .map(|s| {
            let pass = engine::run(spec, weights, &s.frame.to_input(), ExecOptions::inference(spec.steps))?;
            let rates = pass.rates();
            let (lx, ly) = (argmax(&rates[..ROI_SIDE]).0, argmax(&rates[ROI_SIDE..]).0);
            Ok(distance((lx as i64, ly as i64), (s.truth_local.0 as i64, s.truth_local.1 as i64)))
        })
        .collect()
}

pub fn mean_local_error(spec: &NetworkSpec, weights: &Weights, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(local_errors(spec, weights, data)?.iter().sum::<f64>() / data.len() as f64)
}
