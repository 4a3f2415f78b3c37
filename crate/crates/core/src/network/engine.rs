//! Layer-by-layer execution over all time steps at once.
//!
//! The stack is feed-forward, so running layer `l` for every step before
//! layer `l + 1` gives the same result as stepping the whole network once
//! per time step, and lets convolutions and linear maps run as one matrix
//! product over `steps x features` activity matrices.
//!
//! Activities are `rows x features` matrices in channel-major feature order.
//! A layer fed by a constant input (the event frame) has a single row; the
//! first spiking layer broadcasts it to every step.

use ndarray::{Array2, ArrayView2, Axis};

use super::spec::{Activation, LayerKind, LayerSpec, NetworkSpec, Shape};
use super::weights::{LayerWeights, Weights, BN_EPS};
use crate::error::{Error, Result};
use crate::neurons::{NeuronState, QuantizedRelu, SpikeTensor};
use crate::training::surrogate::surrogate_grad;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExecOptions {
    pub steps: usize,
    /// Replace multi-spike IF neurons by their rate-code limit `ReLU(x) / θ`
    /// evaluated once.
    pub ann: bool,
    /// Evaluate quantized ReLUs without rounding (clipped ReLU).
    pub float_activations: bool,
    /// Keep what the backward pass needs.
    pub record: bool,
}

impl ExecOptions {
    pub fn inference(steps: usize) -> Self {
        Self { steps, ann: false, float_activations: false, record: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(layer: &LayerSpec, input: Shape, output: Shape) -> Self {
        Self {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            out_c: output.c,
            kh: layer.kernel.0,
            kw: layer.kernel.1,
            stride: layer.stride,
            out_h: output.h,
            out_w: output.w,
        }
    }

    fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input offset (within one row) of patch element `k` at output position `p`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let plane = self.in_h * self.in_w;
        let positions = self.positions();
        for c in 0..self.in_c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let k = (c * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.out_h {
                        let base = c * plane + (oy * self.stride + ki) * self.in_w + kj;
                        for ox in 0..self.out_w {
                            f(k, oy * self.out_w + ox, base + ox * self.stride);
                        }
                    }
                    let _ = positions;
                }
            }
        }
    }
}

/// `(patch, rows * positions)` matrix of input patches.
fn im2col(x: ArrayView2<f64>, g: &ConvGeom) -> Array2<f64> {
    let rows = x.nrows();
    let positions = g.positions();
    let width = rows * positions;
    let mut cols = Array2::<f64>::zeros((g.patch(), width));
    let out = cols.as_slice_mut().expect("fresh array is contiguous");
    for r in 0..rows {
        let row = x.row(r);
        let row = row.as_slice().expect("activity rows are contiguous");
        g.for_each_tap(|k, p, src| {
            out[k * width + r * positions + p] = row[src];
        });
    }
    cols
}

fn col2im(dcols: &Array2<f64>, rows: usize, g: &ConvGeom) -> Array2<f64> {
    let positions = g.positions();
    let width = rows * positions;
    let mut dx = Array2::<f64>::zeros((rows, g.in_c * g.in_h * g.in_w));
    let src = dcols.as_slice().expect("contiguous");
    for r in 0..rows {
        let mut row = dx.row_mut(r);
        let row = row.as_slice_mut().expect("contiguous");
        g.for_each_tap(|k, p, dst| {
            row[dst] += src[k * width + r * positions + p];
        });
    }
    dx
}

fn conv_forward(x: ArrayView2<f64>, lw: &LayerWeights, g: &ConvGeom) -> (Array2<f64>, Array2<f64>) {
    let cols = im2col(x, g);
    let kernel = ArrayView2::from_shape((g.out_c, g.patch()), &lw.kernel).expect("kernel size checked");
    let prod = kernel.dot(&cols);
    let rows = x.nrows();
    let positions = g.positions();
    let mut out = Array2::<f64>::zeros((rows, g.out_c * positions));
    for r in 0..rows {
        for o in 0..g.out_c {
            let b = lw.bias.as_ref().map_or(0.0, |b| b[o]);
            let src = prod.row(o);
            let src = &src.as_slice().expect("contiguous")[r * positions..(r + 1) * positions];
            let mut dst = out.row_mut(r);
            let dst = &mut dst.as_slice_mut().expect("contiguous")[o * positions..(o + 1) * positions];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    (out, cols)
}

/// Gradients of a convolution given the output gradient.
fn conv_backward(
    d_out: ArrayView2<f64>,
    cols: &Array2<f64>,
    lw: &LayerWeights,
    g: &ConvGeom,
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Option<Array2<f64>>) {
    let rows = d_out.nrows();
    let positions = g.positions();
    let mut dg = Array2::<f64>::zeros((g.out_c, rows * positions));
    for r in 0..rows {
        let src = d_out.row(r);
        for o in 0..g.out_c {
            for p in 0..positions {
                dg[[o, r * positions + p]] = src[o * positions + p];
            }
        }
    }
    let d_kernel = dg.dot(&cols.t());
    let d_bias: Vec<f64> = dg.sum_axis(Axis(1)).to_vec();
    let d_input = need_input_grad.then(|| {
        let kernel = ArrayView2::from_shape((g.out_c, g.patch()), &lw.kernel).expect("kernel size checked");
        let dcols = kernel.t().dot(&dg);
        col2im(&dcols, rows, g)
    });
    (d_kernel.into_raw_vec_and_offset().0, d_bias, d_input)
}

fn linear_forward(x: ArrayView2<f64>, lw: &LayerWeights, out_features: usize) -> Array2<f64> {
    let kernel = ArrayView2::from_shape((out_features, x.ncols()), &lw.kernel).expect("kernel size checked");
    let mut out = x.dot(&kernel.t());
    if let Some(b) = &lw.bias {
        for mut row in out.rows_mut() {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
    }
    out
}

fn linear_backward(
    d_out: ArrayView2<f64>,
    x: &Array2<f64>,
    lw: &LayerWeights,
    need_input_grad: bool,
) -> (Vec<f64>, Vec<f64>, Option<Array2<f64>>) {
    let d_kernel = d_out.t().dot(x);
    let d_bias = d_out.sum_axis(Axis(0)).to_vec();
    let d_input = need_input_grad.then(|| {
        let kernel = ArrayView2::from_shape((d_out.ncols(), x.ncols()), &lw.kernel).expect("kernel size checked");
        d_out.dot(&kernel)
    });
    (d_kernel.into_raw_vec_and_offset().0, d_bias, d_input)
}

/// Pooling with square window `k` and stride `s`. Max pooling also returns
/// the winning input index of every output.
fn pool_forward(x: ArrayView2<f64>, layer: &LayerSpec, input: Shape, output: Shape) -> (Array2<f64>, Option<Vec<u32>>) {
    let (kh, kw) = layer.kernel;
    let s = layer.stride;
    let rows = x.nrows();
    let is_max = layer.kind == LayerKind::MaxPool;
    let mut out = Array2::<f64>::zeros((rows, output.len()));
    let mut argmax = is_max.then(|| vec![0u32; rows * output.len()]);
    let norm = 1.0 / (kh * kw) as f64;
    for r in 0..rows {
        let src = x.row(r);
        for c in 0..output.c {
            for oy in 0..output.h {
                for ox in 0..output.w {
                    let o = (c * output.h + oy) * output.w + ox;
                    let mut acc = if is_max { f64::NEG_INFINITY } else { 0.0 };
                    let mut best = 0usize;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let i = (c * input.h + oy * s + ki) * input.w + ox * s + kj;
                            let v = src[i];
                            if is_max {
                                if v > acc {
                                    acc = v;
                                    best = i;
                                }
                            } else {
                                acc += v;
                            }
                        }
                    }
                    out[[r, o]] = if is_max { acc } else { acc * norm };
                    if let Some(am) = argmax.as_mut() {
                        am[r * output.len() + o] = best as u32;
                    }
                }
            }
        }
    }
    (out, argmax)
}

fn pool_backward(d_out: ArrayView2<f64>, layer: &LayerSpec, input: Shape, output: Shape, argmax: Option<&[u32]>) -> Array2<f64> {
    let rows = d_out.nrows();
    let mut dx = Array2::<f64>::zeros((rows, input.len()));
    let (kh, kw) = layer.kernel;
    let s = layer.stride;
    let norm = 1.0 / (kh * kw) as f64;
    for r in 0..rows {
        for o in 0..output.len() {
            let d = d_out[[r, o]];
            if d == 0.0 {
                continue;
            }
            match argmax {
                Some(am) => dx[[r, am[r * output.len() + o] as usize]] += d,
                None => {
                    let c = o / output.plane();
                    let oy = (o % output.plane()) / output.w;
                    let ox = o % output.w;
                    for ki in 0..kh {
                        for kj in 0..kw {
                            dx[[r, (c * input.h + oy * s + ki) * input.w + ox * s + kj]] += d * norm;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Activity of one neuron layer as recorded in a [`ForwardTrace`].
#[derive(Debug, Clone, PartialEq)]
pub enum Activity {
    Spikes(SpikeTensor),
    /// Real-valued activations (quantized ReLU or the ANN reference).
    Analog(Array2<f64>),
}

impl Activity {
    /// Spikes for spiking layers, non-zero activations otherwise.
    pub fn emitted(&self) -> u64 {
        match self {
            Activity::Spikes(s) => s.total(),
            Activity::Analog(a) => a.iter().filter(|v| **v != 0.0).count() as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLayer {
    /// Index into the network's layer list.
    pub layer: usize,
    pub fan_out: u64,
    pub activity: Activity,
}

/// Per-layer activity of one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ForwardTrace {
    pub layers: Vec<TraceLayer>,
    /// `sum over layers of emitted * fan_out`.
    pub synaptic_ops: u64,
}

impl ForwardTrace {
    pub fn spikes_per_layer(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.activity.emitted()).collect()
    }
}

#[derive(Debug)]
pub(crate) enum ActCache {
    None,
    Spiking { v_pre: Array2<f64> },
    Relu { pre: Array2<f64> },
    Quant { pre: Array2<f64>, q: QuantizedRelu },
}

#[derive(Debug)]
pub(crate) enum LayerCache {
    Pool { argmax: Option<Vec<u32>> },
    Weighted {
        /// im2col patches for conv, raw input for linear.
        input: Array2<f64>,
        bn_hat: Option<Array2<f64>>,
        act: ActCache,
    },
}

/// Per-channel sum, sum of squares and count of pre-norm values.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct BnStats {
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
    pub count: f64,
}

#[derive(Debug)]
pub(crate) struct Pass {
    pub output: Array2<f64>,
    pub trace: ForwardTrace,
    pub caches: Vec<LayerCache>,
    pub bn_stats: Vec<Option<BnStats>>,
}

impl Pass {
    /// Mean of the output activity over rows: the spike rate for spiking
    /// outputs, the value itself for single-step outputs.
    pub fn rates(&self) -> Vec<f64> {
        let rows = self.output.nrows() as f64;
        self.output.sum_axis(Axis(0)).iter().map(|v| v / rows).collect()
    }
}

fn channel_of(index: usize, shape: Shape) -> usize {
    index / shape.plane()
}

pub(crate) fn run(spec: &NetworkSpec, weights: &Weights, input: &[f64], opts: ExecOptions) -> Result<Pass> {
    if input.len() != spec.input.len() {
        return Err(Error::Shape(format!("input has {} values, network expects {}", input.len(), spec.input.len())));
    }
    if opts.steps == 0 {
        return Err(Error::InvalidArgument("at least one time step is required".into()));
    }
    let shapes = spec.shapes()?;
    let mut x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("sized above");
    let mut in_shape = spec.input;
    let mut trace = ForwardTrace::default();
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut bn_stats = Vec::with_capacity(spec.layers.len());

    for (i, (layer, lw)) in spec.layers.iter().zip(&weights.layers).enumerate() {
        let out_shape = shapes[i];
        if layer.kind.is_pool() {
            let (y, argmax) = pool_forward(x.view(), layer, in_shape, out_shape);
            if opts.record {
                caches.push(LayerCache::Pool { argmax });
            }
            bn_stats.push(None);
            x = y;
            in_shape = out_shape;
            continue;
        }
        let (mut z, layer_input) = match layer.kind {
            LayerKind::Conv2d => {
                let g = ConvGeom::new(layer, in_shape, out_shape);
                conv_forward(x.view(), lw, &g)
            }
            _ => (linear_forward(x.view(), lw, layer.out_channels), x),
        };

        let mut bn_hat = None;
        let mut stats = None;
        if let Some(bn) = &lw.bn {
            let channels = bn.gamma.len();
            let mut st = BnStats { sum: vec![0.0; channels], sum_sq: vec![0.0; channels], count: 0.0 };
            let inv_std: Vec<f64> = bn.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut hat = opts.record.then(|| Array2::<f64>::zeros(z.dim()));
            for ((r, j), v) in z.indexed_iter_mut() {
                let c = channel_of(j, out_shape);
                st.sum[c] += *v;
                st.sum_sq[c] += *v * *v;
                let h = (*v - bn.mean[c]) * inv_std[c];
                if let Some(hat) = hat.as_mut() {
                    hat[[r, j]] = h;
                }
                *v = bn.gamma[c] * h + bn.beta[c];
            }
            st.count = (z.len() / channels) as f64;
            stats = Some(st);
            bn_hat = hat;
        }
        bn_stats.push(stats);

        let fan_out = spec.fan_out(i);
        let (a, act_cache) = match layer.activation {
            None => (z, ActCache::None),
            Some(Activation::IfMultispike { threshold }) if opts.ann => {
                let pre = opts.record.then(|| z.clone());
                z.mapv_inplace(|v| v.max(0.0) / threshold);
                (z, pre.map_or(ActCache::None, |pre| ActCache::Relu { pre }))
            }
            Some(Activation::Lif { .. }) if opts.ann => {
                return Err(Error::InvalidArgument("leaky neurons have no single-step rate equivalent".into()))
            }
            Some(act @ (Activation::IfMultispike { .. } | Activation::Lif { .. })) => {
                let (spikes, v_pre) = run_spiking(act, &z, opts.steps, opts.record)?;
                (spikes, v_pre.map_or(ActCache::None, |v_pre| ActCache::Spiking { v_pre }))
            }
            Some(Activation::QuantizedRelu { bits, range_max }) => {
                let q = QuantizedRelu::new((!opts.float_activations).then_some(bits), range_max)?;
                let pre = opts.record.then(|| z.clone());
                z.mapv_inplace(|v| q.apply(v));
                (z, pre.map_or(ActCache::None, |pre| ActCache::Quant { pre, q }))
            }
        };
        if layer.activation.is_some() {
            let activity = match layer.activation {
                Some(Activation::IfMultispike { .. } | Activation::Lif { .. }) if !opts.ann => {
                    let counts = a.iter().map(|&v| v as u32).collect();
                    Activity::Spikes(SpikeTensor::from_counts(a.nrows(), a.ncols(), counts)?)
                }
                _ => Activity::Analog(a.clone()),
            };
            trace.synaptic_ops += activity.emitted() * fan_out;
            trace.layers.push(TraceLayer { layer: i, fan_out, activity });
        }
        if opts.record {
            caches.push(LayerCache::Weighted { input: layer_input, bn_hat, act: act_cache });
        }
        x = a;
        in_shape = out_shape;
    }
    Ok(Pass { output: x, trace, caches, bn_stats })
}

/// Drives one layer of spiking neurons for `steps` steps. A single input
/// row is presented at every step.
fn run_spiking(act: Activation, current: &Array2<f64>, steps: usize, record: bool) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    let n = current.ncols();
    let rows = current.nrows();
    if rows != 1 && rows != steps {
        return Err(Error::Shape(format!("{rows} input rows for {steps} time steps")));
    }
    let mut state = match act {
        Activation::IfMultispike { threshold } => NeuronState::if_multispike(n, threshold)?,
        Activation::Lif { threshold, decay } => NeuronState::lif(n, threshold, decay)?,
        Activation::QuantizedRelu { .. } => unreachable!("not a spiking activation"),
    };
    let mut spikes = Array2::<f64>::zeros((steps, n));
    let mut v_pre = record.then(|| Array2::<f64>::zeros((steps, n)));
    for t in 0..steps {
        let inp = current.row(if rows == 1 { 0 } else { t });
        let mut out = spikes.row_mut(t);
        let pre = v_pre.as_mut().map(|v| v.row_mut(t));
        match pre {
            Some(mut pre) => state.step_into(
                inp.as_slice().expect("contiguous"),
                out.as_slice_mut().expect("contiguous"),
                Some(pre.as_slice_mut().expect("contiguous")),
            )?,
            None => state.step_into(inp.as_slice().expect("contiguous"), out.as_slice_mut().expect("contiguous"), None)?,
        }
    }
    Ok((spikes, v_pre))
}

/// Backward pass through a recorded [`Pass`].
///
/// `d_output` is the loss gradient with respect to the output activity rows.
/// `synops_weight` adds `synops_weight * fan_out` to the gradient of every
/// spike, the derivative of a synaptic-operation penalty. Spike functions
/// are differentiated with the surrogate of width `gamma`; resets are
/// treated as constants.
pub(crate) fn backward(
    spec: &NetworkSpec,
    weights: &Weights,
    pass: &Pass,
    d_output: Array2<f64>,
    synops_weight: f64,
    gamma: f64,
) -> Result<Weights> {
    if pass.caches.len() != spec.layers.len() {
        return Err(Error::InvalidArgument("backward needs a pass recorded with `record`".into()));
    }
    let shapes = spec.shapes()?;
    let mut grads = weights.zeros_like();
    let mut d = d_output;
    for i in (0..spec.layers.len()).rev() {
        let layer = &spec.layers[i];
        let lw = &weights.layers[i];
        let in_shape = if i == 0 { spec.input } else { shapes[i - 1] };
        let out_shape = shapes[i];
        match &pass.caches[i] {
            LayerCache::Pool { argmax } => {
                d = pool_backward(d.view(), layer, in_shape, out_shape, argmax.as_deref());
            }
            LayerCache::Weighted { input, bn_hat, act } => {
                let mut dz = match (act, layer.activation) {
                    (ActCache::None, _) => d,
                    (ActCache::Spiking { v_pre }, Some(a)) => {
                        if synops_weight != 0.0 {
                            let extra = synops_weight * spec.fan_out(i) as f64;
                            d.mapv_inplace(|g| g + extra);
                        }
                        let input_rows = match layer.kind {
                            LayerKind::Conv2d => input.ncols() / out_shape.plane(),
                            _ => input.nrows(),
                        };
                        spiking_backward(a, v_pre, &d, gamma, input_rows)
                    }
                    (ActCache::Relu { pre }, Some(Activation::IfMultispike { threshold })) => {
                        d.zip_mut_with(pre, |g, &z| *g = if z > 0.0 { *g / threshold } else { 0.0 });
                        d
                    }
                    (ActCache::Quant { pre, q }, _) => {
                        d.zip_mut_with(pre, |g, &z| {
                            if !q.pass_through(z) {
                                *g = 0.0
                            }
                        });
                        d
                    }
                    _ => return Err(Error::InvalidArgument(format!("layer {i}: cache does not match activation"))),
                };

                if let (Some(bn), Some(hat)) = (&lw.bn, bn_hat) {
                    let gbn = grads.layers[i].bn.as_mut().expect("mirrors weights");
                    for ((r, j), g) in dz.indexed_iter_mut() {
                        let c = channel_of(j, out_shape);
                        gbn.gamma[c] += *g * hat[[r, j]];
                        gbn.beta[c] += *g;
                        *g *= bn.gamma[c] / (bn.var[c] + BN_EPS).sqrt();
                    }
                }

                let need_input = i > 0;
                let (dk, db, dx) = match layer.kind {
                    LayerKind::Conv2d => {
                        let g = ConvGeom::new(layer, in_shape, out_shape);
                        conv_backward(dz.view(), input, lw, &g, need_input)
                    }
                    _ => linear_backward(dz.view(), input, lw, need_input),
                };
                let gl = &mut grads.layers[i];
                gl.kernel = dk;
                if let Some(b) = gl.bias.as_mut() {
                    *b = db;
                }
                match dx {
                    Some(dx) => d = dx,
                    None => break,
                }
            }
        }
    }
    Ok(grads)
}

/// Reverse-time pass through one layer of spiking neurons. Returns the
/// gradient with respect to the input current, summed over steps when the
/// current was a single broadcast row.
fn spiking_backward(act: Activation, v_pre: &Array2<f64>, d_spikes: &Array2<f64>, gamma: f64, input_rows: usize) -> Array2<f64> {
    let (steps, n) = v_pre.dim();
    let (threshold, keep, periodic) = match act {
        Activation::IfMultispike { threshold } => (threshold, 1.0, true),
        Activation::Lif { threshold, decay } => (threshold, 1.0 - decay, false),
        Activation::QuantizedRelu { .. } => unreachable!("not a spiking activation"),
    };
    let mut d_current = Array2::<f64>::zeros((input_rows, n));
    let mut carry = vec![0.0; n];
    for t in (0..steps).rev() {
        let row = if input_rows == 1 { 0 } else { t };
        for j in 0..n {
            let dv = d_spikes[[t, j]] * surrogate_grad(v_pre[[t, j]], threshold, gamma, periodic) + carry[j];
            d_current[[row, j]] += dv;
            carry[j] = keep * dv;
        }
    }
    d_current
}
