use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Activation, LayerKind, LayerSpec, NetworkSpec, Profile, Shape};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

const MODEL_MAGIC: &str = "evsnn-model";
const MODEL_VERSION: u32 = 1;

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `(scale, shift)` with `y = scale * x + shift` per channel.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + BN_EPS).sqrt())
            .collect();
        let shift = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((b, m), s)| b - s * m)
            .collect();
        (scale, shift)
    }
}

/// Parameters of one layer. Pooling layers hold an empty kernel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerWeights {
    /// Conv: `[out][in][kh][kw]`; linear: `[out][in]`.
    pub kernel: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub bn: Option<BatchNorm>,
}

impl LayerWeights {
    pub fn max_abs(&self) -> f64 {
        self.kernel.iter().fold(0.0, |m, w| m.max(w.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub layers: Vec<LayerWeights>,
}

/// Number of kernel entries and fan-in of layer `layer` given its input.
pub fn kernel_geometry(layer: &LayerSpec, input: Shape) -> (usize, usize) {
    match layer.kind {
        LayerKind::Conv2d => {
            let fan_in = input.c * layer.kernel.0 * layer.kernel.1;
            (layer.out_channels * fan_in, fan_in)
        }
        LayerKind::Linear => (layer.out_channels * input.len(), input.len()),
        LayerKind::AvgPool | LayerKind::MaxPool => (0, 0),
    }
}

impl Weights {
    /// Uniform in `±1/sqrt(fan_in)`, zero biases, identity batch norm.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut input = spec.input;
        let shapes = spec.shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (layer, &out) in spec.layers.iter().zip(&shapes) {
            let (n, fan_in) = kernel_geometry(layer, input);
            let mut lw = LayerWeights::default();
            if n > 0 {
                let bound = 1.0 / (fan_in as f64).sqrt();
                lw.kernel = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                if layer.has_bias {
                    lw.bias = Some(vec![0.0; layer.out_channels]);
                }
                if layer.batchnorm {
                    lw.bn = Some(BatchNorm::identity(layer.out_channels));
                }
            }
            layers.push(lw);
            input = out;
        }
        Ok(Self { layers })
    }

    /// Same structure with every parameter set to zero; used for gradients.
    pub fn zeros_like(&self) -> Self {
        let zero = |v: &Vec<f64>| vec![0.0; v.len()];
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    kernel: zero(&l.kernel),
                    bias: l.bias.as_ref().map(zero),
                    bn: l.bn.as_ref().map(|bn| BatchNorm {
                        gamma: zero(&bn.gamma),
                        beta: zero(&bn.beta),
                        mean: zero(&bn.mean),
                        var: zero(&bn.var),
                    }),
                })
                .collect(),
        }
    }

    /// Trainable tensors in a fixed order: kernel, bias, bn gamma, bn beta.
    pub fn trainable(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.kernel.as_slice());
            if let Some(b) = &l.bias {
                out.push(b.as_slice());
            }
            if let Some(bn) = &l.bn {
                out.push(bn.gamma.as_slice());
                out.push(bn.beta.as_slice());
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push(l.kernel.as_mut_slice());
            if let Some(b) = &mut l.bias {
                out.push(b.as_mut_slice());
            }
            if let Some(bn) = &mut l.bn {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// `self += scale * other` over trainable tensors.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (dst, src) in self.trainable_mut().into_iter().zip(other.trainable()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Per-layer `max |w|` over kernels of weighted layers.
    pub fn layer_max_abs(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter(|l| !l.kernel.is_empty())
            .map(LayerWeights::max_abs)
            .collect()
    }

    /// Checks tensor sizes against `spec` and that every value is finite.
    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::Shape(format!(
                "{} weight layers for a {}-layer network",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        let mut input = spec.input;
        for (i, ((layer, lw), out)) in spec.layers.iter().zip(&self.layers).zip(spec.shapes()?).enumerate() {
            let (n, _) = kernel_geometry(layer, input);
            if lw.kernel.len() != n {
                return Err(Error::Shape(format!("layer {i}: kernel has {} values, expected {n}", lw.kernel.len())));
            }
            let ch = layer.out_channels;
            match (&lw.bias, layer.has_bias) {
                (Some(b), true) if b.len() == ch => {}
                (None, false) => {}
                // Folded batch norm turns into a bias.
                (Some(b), false) if layer.batchnorm && b.len() == ch => {}
                _ => return Err(Error::Shape(format!("layer {i}: bias does not match spec"))),
            }
            if let Some(bn) = &lw.bn {
                if !layer.batchnorm {
                    return Err(Error::Shape(format!("layer {i}: unexpected batch norm")));
                }
                if [&bn.gamma, &bn.beta, &bn.mean, &bn.var].iter().any(|v| v.len() != ch) {
                    return Err(Error::Shape(format!("layer {i}: batch norm size mismatch")));
                }
                if bn.var.iter().any(|&v| v < 0.0) {
                    return Err(Error::Validation(format!("layer {i}: negative batch norm variance")));
                }
            }
            input = out;
        }
        let finite = self.layers.iter().all(|l| {
            l.kernel.iter().chain(l.bias.iter().flatten()).all(|v| v.is_finite())
                && l.bn.as_ref().is_none_or(|bn| {
                    bn.gamma.iter().chain(&bn.beta).chain(&bn.mean).chain(&bn.var).all(|v| v.is_finite())
                })
        });
        if !finite {
            return Err(Error::NonFinite("weights"));
        }
        Ok(())
    }

    /// Folds batch norm into kernel and bias: `w' = s * w`, `b' = s * b + t`.
    pub fn fold_batchnorm(&self, spec: &NetworkSpec) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut out = self.clone();
        for (i, lw) in out.layers.iter_mut().enumerate() {
            let Some(bn) = lw.bn.take() else { continue };
            let (scale, shift) = bn.affine();
            let channels = scale.len();
            let per_channel = lw.kernel.len() / channels.max(1);
            for (c, chunk) in lw.kernel.chunks_mut(per_channel).enumerate() {
                chunk.iter_mut().for_each(|w| *w *= scale[c]);
            }
            let bias = lw.bias.get_or_insert_with(|| vec![0.0; channels]);
            for c in 0..channels {
                bias[c] = scale[c] * bias[c] + shift[c];
            }
            debug_assert_eq!(shapes[i].c, channels);
        }
        Ok(out)
    }
}

/// A network architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub weights: Weights,
}

impl Model {
    pub fn new(spec: NetworkSpec, weights: Weights) -> Result<Self> {
        spec.validate()?;
        weights.check(&spec)?;
        Ok(Self { spec, weights })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let spec = &self.spec;
        let _ = writeln!(s, "{MODEL_MAGIC} {MODEL_VERSION}");
        let _ = writeln!(s, "profile {}", spec.profile.name());
        let _ = writeln!(s, "steps {}", spec.steps);
        let _ = writeln!(s, "weight_bits {}", spec.weight_bits);
        let _ = writeln!(s, "input {} {} {}", spec.input.c, spec.input.h, spec.input.w);
        let _ = writeln!(s, "layers {}", spec.layers.len());
        for layer in &spec.layers {
            let _ = writeln!(s, "layer {}", layer_line(layer));
        }
        for (i, lw) in self.weights.layers.iter().enumerate() {
            if !lw.kernel.is_empty() {
                write_tensor(&mut s, i, "kernel", &lw.kernel);
            }
            if let Some(b) = &lw.bias {
                write_tensor(&mut s, i, "bias", b);
            }
            if let Some(bn) = &lw.bn {
                write_tensor(&mut s, i, "bn_gamma", &bn.gamma);
                write_tensor(&mut s, i, "bn_beta", &bn.beta);
                write_tensor(&mut s, i, "bn_mean", &bn.mean);
                write_tensor(&mut s, i, "bn_var", &bn.var);
            }
        }
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| -> Result<(usize, &str)> {
            lines
                .next()
                .ok_or_else(|| Error::parse(source, 0, format!("unexpected end of file, expected {what}")))
        };
        let err = |line: usize, msg: String| Error::parse(source, line, msg);

        let (ln, header) = next("header")?;
        let version = header
            .strip_prefix(MODEL_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| err(ln, "not an evsnn model file".into()))?;
        if version != MODEL_VERSION {
            return Err(err(ln, format!("unsupported model format version {version}")));
        }
        let mut field = |name: &str| -> Result<(usize, String)> {
            let (ln, line) = next(name)?;
            let rest = line
                .strip_prefix(name)
                .filter(|r| r.starts_with(' '))
                .ok_or_else(|| err(ln, format!("expected `{name}`")))?;
            Ok((ln, rest.trim().to_string()))
        };
        let (_, profile) = field("profile")?;
        let profile = Profile::parse(&profile)?;
        let (ln, steps) = field("steps")?;
        let steps: usize = steps.parse().map_err(|_| err(ln, "bad steps".into()))?;
        let (ln, bits) = field("weight_bits")?;
        let weight_bits: u32 = bits.parse().map_err(|_| err(ln, "bad weight_bits".into()))?;
        let (ln, input) = field("input")?;
        let dims: Vec<usize> = input
            .split_whitespace()
            .map(|d| d.parse().map_err(|_| err(ln, "bad input shape".into())))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(err(ln, "input needs three dimensions".into()));
        }
        let (ln, count) = field("layers")?;
        let count: usize = count.parse().map_err(|_| err(ln, "bad layer count".into()))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, line) = field("layer")?;
            layers.push(parse_layer(&line).map_err(|m| err(ln, m))?);
        }
        let spec = NetworkSpec {
            profile,
            input: Shape::new(dims[0], dims[1], dims[2]),
            steps,
            weight_bits,
            layers,
        };
        spec.validate()?;

        let mut weights = Weights { layers: vec![LayerWeights::default(); spec.layers.len()] };
        loop {
            let (ln, line) = next("tensor or end")?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [tag, idx, name, len] = parts[..] else {
                return Err(err(ln, "expected `tensor <layer> <name> <len>`".into()));
            };
            if tag != "tensor" {
                return Err(err(ln, format!("expected `tensor`, got `{tag}`")));
            }
            let idx: usize = idx.parse().map_err(|_| err(ln, "bad layer index".into()))?;
            let len: usize = len.parse().map_err(|_| err(ln, "bad tensor length".into()))?;
            let lw = weights.layers.get_mut(idx).ok_or_else(|| err(ln, format!("layer {idx} out of range")))?;
            let mut values = Vec::with_capacity(len);
            while values.len() < len {
                let (vln, vline) = next("tensor values")?;
                for tok in vline.split_whitespace() {
                    let v: f64 = tok.parse().map_err(|_| err(vln, format!("bad number `{tok}`")))?;
                    values.push(v);
                }
            }
            if values.len() != len {
                return Err(err(ln, format!("tensor has {} values, header says {len}", values.len())));
            }
            match name {
                "kernel" => lw.kernel = values,
                "bias" => lw.bias = Some(values),
                "bn_gamma" => bn_mut(lw).gamma = values,
                "bn_beta" => bn_mut(lw).beta = values,
                "bn_mean" => bn_mut(lw).mean = values,
                "bn_var" => bn_mut(lw).var = values,
                other => return Err(err(ln, format!("unknown tensor `{other}`"))),
            }
        }
        Model::new(spec, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

fn bn_mut(lw: &mut LayerWeights) -> &mut BatchNorm {
    lw.bn.get_or_insert_with(|| BatchNorm::identity(0))
}

fn write_tensor(s: &mut String, layer: usize, name: &str, values: &[f64]) {
    let _ = writeln!(s, "tensor {layer} {name} {}", values.len());
    for chunk in values.chunks(8) {
        let line: Vec<String> = chunk.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
}

fn layer_line(layer: &LayerSpec) -> String {
    let mut s = format!(
        "{} out={} kernel={}x{} stride={} bias={} batchnorm={}",
        layer.kind.name(),
        layer.out_channels,
        layer.kernel.0,
        layer.kernel.1,
        layer.stride,
        u8::from(layer.has_bias),
        u8::from(layer.batchnorm)
    );
    match layer.activation {
        None => s.push_str(" act=none"),
        Some(Activation::IfMultispike { threshold }) => {
            let _ = write!(s, " act=if_multispike threshold={threshold}");
        }
        Some(Activation::Lif { threshold, decay }) => {
            let _ = write!(s, " act=lif threshold={threshold} decay={decay}");
        }
        Some(Activation::QuantizedRelu { bits, range_max }) => {
            let _ = write!(s, " act=quantized_relu bits={bits} range_max={range_max}");
        }
    }
    s
}

fn parse_layer(line: &str) -> std::result::Result<LayerSpec, String> {
    let mut tokens = line.split_whitespace();
    let kind_tok = tokens.next().ok_or("empty layer line")?;
    let kind = LayerKind::parse(kind_tok).ok_or_else(|| format!("unknown layer kind `{kind_tok}`"))?;
    let mut kv = std::collections::HashMap::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| format!("expected key=value, got `{tok}`"))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| format!("missing `{k}`"));
    let num = |k: &str| -> std::result::Result<f64, String> {
        get(k)?.parse::<f64>().map_err(|_| format!("bad `{k}`"))
    };
    let int = |k: &str| -> std::result::Result<usize, String> {
        get(k)?.parse::<usize>().map_err(|_| format!("bad `{k}`"))
    };
    let flag = |k: &str| -> std::result::Result<bool, String> {
        match get(k)? {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(format!("bad flag `{k}={other}`")),
        }
    };
    let (kh, kw) = get("kernel")?
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or("bad kernel")?;
    let activation = match get("act")? {
        "none" => None,
        "if_multispike" => Some(Activation::IfMultispike { threshold: num("threshold")? }),
        "lif" => Some(Activation::Lif { threshold: num("threshold")?, decay: num("decay")? }),
        "quantized_relu" => Some(Activation::QuantizedRelu {
            bits: int("bits")? as u32,
            range_max: num("range_max")?,
        }),
        other => return Err(format!("unknown activation `{other}`")),
    };
    Ok(LayerSpec {
        kind,
        out_channels: int("out")?,
        kernel: (kh, kw),
        stride: int("stride")?,
        has_bias: flag("bias")?,
        batchnorm: flag("batchnorm")?,
        activation,
    })
}
