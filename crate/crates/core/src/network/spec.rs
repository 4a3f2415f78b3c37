use std::fmt;

use crate::error::{Error, Result};
use crate::neurons::NeuronMode;
use crate::{OUTPUT_WIDTH, ROI_SIDE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv2d,
    AvgPool,
    MaxPool,
    Linear,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::AvgPool => "avgpool",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv2d" => Some(LayerKind::Conv2d),
            "avgpool" => Some(LayerKind::AvgPool),
            "maxpool" => Some(LayerKind::MaxPool),
            "linear" => Some(LayerKind::Linear),
            _ => None,
        }
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::AvgPool | LayerKind::MaxPool)
    }

    pub fn has_weights(self) -> bool {
        !self.is_pool()
    }
}

/// Neuron model applied after a weighted layer, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    IfMultispike { threshold: f64 },
    Lif { threshold: f64, decay: f64 },
    QuantizedRelu { bits: u32, range_max: f64 },
}

impl Activation {
    pub fn mode(&self) -> NeuronMode {
        match self {
            Activation::IfMultispike { .. } => NeuronMode::IfMultispike,
            Activation::Lif { .. } => NeuronMode::LifSingle,
            Activation::QuantizedRelu { .. } => NeuronMode::QuantizedRelu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output channels for conv, output features for linear; unused by pooling.
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub has_bias: bool,
    pub batchnorm: bool,
    pub activation: Option<Activation>,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            has_bias: false,
            batchnorm: false,
            activation: None,
        }
    }

    pub fn linear(out_features: usize) -> Self {
        Self {
            kind: LayerKind::Linear,
            out_channels: out_features,
            kernel: (1, 1),
            stride: 1,
            has_bias: false,
            batchnorm: false,
            activation: None,
        }
    }

    pub fn avg_pool(size: usize) -> Self {
        Self::pool(LayerKind::AvgPool, size)
    }

    pub fn max_pool(size: usize) -> Self {
        Self::pool(LayerKind::MaxPool, size)
    }

    fn pool(kind: LayerKind, size: usize) -> Self {
        Self {
            kind,
            out_channels: 0,
            kernel: (size, size),
            stride: size,
            has_bias: false,
            batchnorm: false,
            activation: None,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = Some(activation);
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.has_bias = true;
        self
    }

    pub fn with_batchnorm(mut self) -> Self {
        self.batchnorm = true;
        self
    }
}

/// Channel-major tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn flat(n: usize) -> Self {
        Self { c: n, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Profile {
    SinabsLike,
    MetatfLike,
    LavaLike,
    Custom,
}

impl Profile {
    pub const BUILT_IN: [Profile; 3] = [Profile::SinabsLike, Profile::MetatfLike, Profile::LavaLike];

    pub fn name(self) -> &'static str {
        match self {
            Profile::SinabsLike => "sinabs_like",
            Profile::MetatfLike => "metatf_like",
            Profile::LavaLike => "lava_like",
            Profile::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sinabs_like" => Ok(Profile::SinabsLike),
            "metatf_like" => Ok(Profile::MetatfLike),
            "lava_like" => Ok(Profile::LavaLike),
            "custom" => Ok(Profile::Custom),
            other => Err(Error::UnknownProfile(other.to_string())),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Threshold of the multi-spike IF neurons (rate code of a ReLU).
pub const IF_THRESHOLD: f64 = 1.0;
pub const LIF_THRESHOLD: f64 = 0.25;
pub const LIF_DECAY: f64 = 0.05;
pub const QRELU_BITS: u32 = 4;
/// Placeholder clamp range until calibrated on training data.
pub const QRELU_DEFAULT_RANGE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub profile: Profile,
    pub input: Shape,
    /// Time steps per inference.
    pub steps: usize,
    /// Weight precision the network is meant to be deployed with.
    pub weight_bits: u32,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Builds and validates a custom stack on the 64x64x1 input.
    pub fn custom(layers: Vec<LayerSpec>, steps: usize, weight_bits: u32) -> Result<Self> {
        let spec = Self {
            profile: Profile::Custom,
            input: Shape::new(1, ROI_SIDE, ROI_SIDE),
            steps,
            weight_bits,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// One of the three shipped architectures.
    pub fn profile(profile: Profile) -> Result<Self> {
        let ifn = Activation::IfMultispike { threshold: IF_THRESHOLD };
        let lif = Activation::Lif { threshold: LIF_THRESHOLD, decay: LIF_DECAY };
        let qrelu = Activation::QuantizedRelu { bits: QRELU_BITS, range_max: QRELU_DEFAULT_RANGE };
        let (steps, weight_bits, layers) = match profile {
            Profile::SinabsLike => (
                8,
                8,
                vec![
                    LayerSpec::conv(4, 5, 2).with_activation(ifn),
                    LayerSpec::avg_pool(2),
                    LayerSpec::conv(4, 3, 1).with_activation(ifn),
                    LayerSpec::avg_pool(2),
                    LayerSpec::linear(64).with_activation(ifn),
                    LayerSpec::linear(OUTPUT_WIDTH).with_activation(ifn),
                ],
            ),
            Profile::MetatfLike => (
                1,
                4,
                vec![
                    LayerSpec::conv(4, 5, 2).with_bias().with_batchnorm().with_activation(qrelu),
                    LayerSpec::max_pool(2),
                    LayerSpec::conv(4, 3, 2).with_bias().with_batchnorm().with_activation(qrelu),
                    LayerSpec::linear(64).with_bias().with_batchnorm().with_activation(qrelu),
                    LayerSpec::linear(OUTPUT_WIDTH).with_bias(),
                ],
            ),
            Profile::LavaLike => (
                20,
                8,
                vec![
                    LayerSpec::conv(8, 5, 2).with_activation(lif),
                    LayerSpec::conv(16, 3, 1).with_activation(lif),
                    LayerSpec::linear(64).with_activation(lif),
                    LayerSpec::linear(OUTPUT_WIDTH).with_activation(lif),
                ],
            ),
            Profile::Custom => return Err(Error::UnknownProfile("custom".into())),
        };
        let spec = Self {
            profile,
            input: Shape::new(1, ROI_SIDE, ROI_SIDE),
            steps,
            weight_bits,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::profile(Profile::parse(name)?)
    }

    /// Output shape of every layer under valid (unpadded) convolution.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut shape = self.input;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = output_shape(i, layer, shape)?;
            out.push(shape);
        }
        Ok(out)
    }

    /// Input shape of layer `i`.
    pub fn input_shape(&self, i: usize) -> Result<Shape> {
        Ok(if i == 0 { self.input } else { self.shapes()?[i - 1] })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("networks need at least one time step".into()));
        }
        if self.weight_bits == 0 {
            return Err(Error::Validation("weight_bits must be at least 1".into()));
        }
        if self.input.is_empty() {
            return Err(Error::Validation("empty input shape".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.stride == 0 || layer.kernel.0 == 0 || layer.kernel.1 == 0 {
                return Err(Error::Validation(format!("layer {i}: stride and kernel must be at least 1")));
            }
            if layer.kind.is_pool() && (layer.has_bias || layer.batchnorm || layer.activation.is_some()) {
                return Err(Error::Validation(format!("layer {i}: pooling layers carry no weights or neurons")));
            }
            if layer.kind.has_weights() && layer.out_channels == 0 {
                return Err(Error::Validation(format!("layer {i}: zero output channels")));
            }
            if let Some(act) = layer.activation {
                validate_activation(i, act)?;
            }
        }
        let last = self
            .layers
            .last()
            .ok_or_else(|| Error::Validation("network has no layers".into()))?;
        if last.kind != LayerKind::Linear || last.out_channels != OUTPUT_WIDTH {
            return Err(Error::Validation(format!(
                "final layer must be linear with {OUTPUT_WIDTH} outputs"
            )));
        }
        self.shapes()?;
        Ok(())
    }

    /// Index of the next weighted layer after `i`, skipping pooling.
    pub fn next_weighted(&self, i: usize) -> Option<usize> {
        (i + 1..self.layers.len()).find(|&j| self.layers[j].kind.has_weights())
    }

    /// Outgoing synapses per neuron of layer `i`: the nominal fan-out of the
    /// next weighted layer (`out_channels * kh * kw` for conv, output width
    /// for linear), 0 for the output layer.
    pub fn fan_out(&self, i: usize) -> u64 {
        match self.next_weighted(i) {
            None => 0,
            Some(j) => {
                let next = &self.layers[j];
                match next.kind {
                    LayerKind::Conv2d => (next.out_channels * next.kernel.0 * next.kernel.1) as u64,
                    _ => next.out_channels as u64,
                }
            }
        }
    }

    /// Number of weighted layers up to and including `i`; the 1-based
    /// conv/linear stage a layer belongs to.
    pub fn stage(&self, i: usize) -> usize {
        self.layers[..=i].iter().filter(|l| l.kind.has_weights()).count()
    }

    pub fn is_spiking(&self) -> bool {
        self.layers
            .iter()
            .filter_map(|l| l.activation)
            .any(|a| a.mode().is_spiking())
    }

    pub fn pooling_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].kind.is_pool()).collect()
    }
}

fn validate_activation(i: usize, act: Activation) -> Result<()> {
    let ok = match act {
        Activation::IfMultispike { threshold } => threshold > 0.0 && threshold.is_finite(),
        Activation::Lif { threshold, decay } => threshold > 0.0 && threshold.is_finite() && (0.0..1.0).contains(&decay),
        Activation::QuantizedRelu { bits, range_max } => (1..=32).contains(&bits) && range_max > 0.0 && range_max.is_finite(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("layer {i}: invalid activation parameters {act:?}")))
    }
}

fn output_shape(i: usize, layer: &LayerSpec, input: Shape) -> Result<Shape> {
    let (kh, kw) = layer.kernel;
    match layer.kind {
        LayerKind::Linear => Ok(Shape::flat(layer.out_channels)),
        LayerKind::Conv2d | LayerKind::AvgPool | LayerKind::MaxPool => {
            if kh > input.h || kw > input.w {
                return Err(Error::Validation(format!(
                    "layer {i}: {}x{} {} does not fit input {input}",
                    kh,
                    kw,
                    layer.kind.name()
                )));
            }
            let h = (input.h - kh) / layer.stride + 1;
            let w = (input.w - kw) / layer.stride + 1;
            let c = if layer.kind == LayerKind::Conv2d { layer.out_channels } else { input.c };
            Ok(Shape::new(c, h, w))
        }
    }
}
