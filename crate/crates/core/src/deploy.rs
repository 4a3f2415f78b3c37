//! Device constraint checks and weight quantization for deployment.

use std::fmt;
use std::path::Path;

use crate::decode::ErrorStats;
use crate::error::{Error, Result};
use crate::event_pipeline::LabeledSample;
use crate::kv::KeyValues;
use crate::network::{LayerKind, NetworkSpec, Weights};
use crate::neurons::NeuronMode;
use crate::training::local_errors;

const DYNAPCNN_LIKE: &str = include_str!("../profiles/dynapcnn_like.profile");
const AKIDA_LIKE: &str = include_str!("../profiles/akida_like.profile");
const LOIHI2_LIKE: &str = include_str!("../profiles/loihi2_like.profile");

pub const BUILT_IN_DEVICES: [&str; 3] = ["dynapcnn_like", "akida_like", "loihi2_like"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingRule {
    None,
    /// Only directly after the first weighted layer.
    FirstLayerOnly,
    All,
}

impl PoolingRule {
    pub fn name(self) -> &'static str {
        match self {
            PoolingRule::None => "none",
            PoolingRule::FirstLayerOnly => "first_layer_only",
            PoolingRule::All => "all",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(PoolingRule::None),
            "first_layer_only" => Some(PoolingRule::FirstLayerOnly),
            "all" => Some(PoolingRule::All),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    pub name: String,
    pub max_neurons_per_layer: usize,
    pub allowed_layer_kinds: Vec<LayerKind>,
    pub pooling: PoolingRule,
    pub bias_supported: bool,
    pub weight_bits: u32,
    pub neuron_modes: Vec<NeuronMode>,
}

fn parse_list<T>(kv: &KeyValues, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    let raw: String = kv.require(key)?;
    let mut out = Vec::new();
    for item in raw.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        out.push(parse(item).ok_or_else(|| kv.invalid(key, format!("unknown entry `{item}` in `{key}`")))?);
    }
    if out.is_empty() {
        return Err(kv.invalid(key, format!("`{key}` must list at least one entry")));
    }
    Ok(out)
}

impl DeviceProfile {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let kv = KeyValues::parse(text, source)?;
        let pooling_raw: String = kv.require("pooling")?;
        let pooling = PoolingRule::parse(&pooling_raw)
            .ok_or_else(|| kv.invalid("pooling", format!("unknown pooling rule `{pooling_raw}`")))?;
        let profile = Self {
            name: kv.require("name")?,
            max_neurons_per_layer: kv.require("max_neurons_per_layer")?,
            allowed_layer_kinds: parse_list(&kv, "layer_kinds", LayerKind::parse)?,
            pooling,
            bias_supported: kv.require("bias")?,
            weight_bits: kv.require("weight_bits")?,
            neuron_modes: parse_list(&kv, "neuron_modes", NeuronMode::parse)?,
        };
        if profile.weight_bits == 0 {
            return Err(kv.invalid("weight_bits", "weight_bits must be at least 1"));
        }
        Ok(profile)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn built_in(name: &str) -> Result<Self> {
        let text = match name {
            "dynapcnn_like" => DYNAPCNN_LIKE,
            "akida_like" => AKIDA_LIKE,
            "loihi2_like" => LOIHI2_LIKE,
            other => return Err(Error::UnknownProfile(other.to_string())),
        };
        Self::parse(text, name)
    }

    /// A built-in name or a path to a profile file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUILT_IN_DEVICES.contains(&name_or_path) {
            Self::built_in(name_or_path)
        } else if Path::new(name_or_path).is_file() {
            Self::read(Path::new(name_or_path))
        } else {
            Err(Error::UnknownProfile(name_or_path.to_string()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Index into the network's layer list.
    pub layer: usize,
    /// 1-based count of weighted layers up to and including this one, so a
    /// pooling layer shares the stage of the layer it follows.
    pub stage: usize,
    pub constraint: &'static str,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer {} (stage {}): {}: {}", self.layer, self.stage, self.constraint, self.detail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationReport {
    pub device: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every layer against the device and reports all violations.
pub fn validate(spec: &NetworkSpec, device: &DeviceProfile) -> Result<ValidationReport> {
    let shapes = spec.shapes()?;
    let mut violations = Vec::new();
    let mut push = |layer: usize, constraint: &'static str, detail: String| {
        violations.push(Violation { layer, stage: spec.stage(layer), constraint, detail });
    };
    for (i, layer) in spec.layers.iter().enumerate() {
        let kind_supported = device.allowed_layer_kinds.contains(&layer.kind);
        if layer.kind.is_pool() {
            // A misplaced pool is reported once, as a pooling violation.
            let placement = match device.pooling {
                PoolingRule::None => Some("the device has no pooling"),
                PoolingRule::FirstLayerOnly if spec.stage(i) != 1 => Some("pooling is only supported after the first weighted layer"),
                _ => None,
            };
            match placement {
                Some(msg) => push(i, "pooling", msg.to_string()),
                None if !kind_supported => push(i, "layer_kind", format!("{} layers are not supported", layer.kind.name())),
                None => {}
            }
            continue;
        }
        if !kind_supported {
            push(i, "layer_kind", format!("{} layers are not supported", layer.kind.name()));
        }
        let neurons = shapes[i].len();
        if neurons > device.max_neurons_per_layer {
            push(i, "max_neurons_per_layer", format!("{neurons} neurons exceed the limit of {}", device.max_neurons_per_layer));
        }
        if (layer.has_bias || layer.batchnorm) && !device.bias_supported {
            push(i, "bias", "layer needs a bias but the device has none".to_string());
        }
        if spec.weight_bits > device.weight_bits {
            push(i, "weight_bits", format!("{}-bit weights, device holds {}", spec.weight_bits, device.weight_bits));
        }
        if let Some(act) = layer.activation {
            if !device.neuron_modes.contains(&act.mode()) {
                push(i, "neuron_mode", format!("{} neurons are not supported", act.mode().name()));
            }
        }
    }
    Ok(ValidationReport { device: device.name.clone(), violations })
}

/// Symmetric uniform quantization onto `2^(bits-1) - 1` levels per sign.
/// Returns the values on the grid and the step size; an all-zero kernel
/// gets step 1.
pub fn quantize_kernel(kernel: &[f64], bits: u32) -> Result<(Vec<f64>, f64)> {
    if !(2..=53).contains(&bits) {
        return Err(Error::InvalidArgument(format!("cannot quantize to {bits} bits")));
    }
    let max = kernel.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if !max.is_finite() {
        return Err(Error::NonFinite("weights"));
    }
    if max == 0.0 {
        return Ok((kernel.to_vec(), 1.0));
    }
    let levels = ((1u64 << (bits - 1)) - 1) as f64;
    let scale = max / levels;
    Ok((kernel.iter().map(|w| (w / scale).round() * scale).collect(), scale))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub weights: Weights,
    /// Step size per layer (1 for layers without kernel).
    pub scales: Vec<f64>,
    /// Largest `|w - q(w)|` per layer.
    pub max_error: Vec<f64>,
}

/// Quantizes every kernel with its own scale; biases and batch-norm
/// parameters are left in full precision.
pub fn quantize_weights(weights: &Weights, bits: u32) -> Result<Quantized> {
    let mut out = weights.clone();
    let mut scales = Vec::with_capacity(weights.layers.len());
    let mut max_error = Vec::with_capacity(weights.layers.len());
    for (lw, q) in weights.layers.iter().zip(&mut out.layers) {
        let (values, scale) = quantize_kernel(&lw.kernel, bits)?;
        let err = lw.kernel.iter().zip(&values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        q.kernel = values;
        scales.push(scale);
        max_error.push(err);
    }
    Ok(Quantized { weights: out, scales, max_error })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizationGap {
    pub float: ErrorStats,
    pub quantized: ErrorStats,
}

impl QuantizationGap {
    /// Increase in mean pixel error caused by quantization.
    pub fn mean_gap(&self) -> f64 {
        self.quantized.mean - self.float.mean
    }
}

/// Pixel error of the network before and after quantizing its (batch-norm
/// folded) kernels to `bits`.
pub fn report_gap(spec: &NetworkSpec, weights: &Weights, data: &[LabeledSample], bits: u32) -> Result<QuantizationGap> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let folded = weights.fold_batchnorm(spec)?;
    let quantized = quantize_weights(&folded, bits)?.weights;
    Ok(QuantizationGap {
        float: ErrorStats::from_distances(&local_errors(spec, &folded, data)?),
        quantized: ErrorStats::from_distances(&local_errors(spec, &quantized, data)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerSpec, Profile};
    use proptest::prelude::*;

    fn spec(p: Profile) -> NetworkSpec {
        NetworkSpec::profile(p).unwrap()
    }

    fn device(name: &str) -> DeviceProfile {
        DeviceProfile::built_in(name).unwrap()
    }

    #[test]
    fn built_ins_parse() {
        for name in BUILT_IN_DEVICES {
            assert_eq!(device(name).name, name);
        }
        assert!(matches!(DeviceProfile::built_in("tpu"), Err(Error::UnknownProfile(_))));
    }

    #[test]
    fn each_profile_fits_its_device() {
        for (p, d) in [
            (Profile::SinabsLike, "dynapcnn_like"),
            (Profile::MetatfLike, "akida_like"),
            (Profile::LavaLike, "loihi2_like"),
        ] {
            let r = validate(&spec(p), &device(d)).unwrap();
            assert!(r.passed(), "{p} on {d}: {:?}", r.violations);
        }
    }

    #[test]
    fn sinabs_on_loihi_fails_both_pools() {
        let r = validate(&spec(Profile::SinabsLike), &device("loihi2_like")).unwrap();
        let pools: Vec<usize> = r.violations.iter().filter(|v| v.constraint == "pooling").map(|v| v.layer).collect();
        assert_eq!(pools, vec![1, 3]);
    }

    #[test]
    fn second_pool_fails_akida_at_stage_two() {
        let mut s = spec(Profile::MetatfLike);
        s.layers.insert(3, LayerSpec::max_pool(2));
        s.layers[2].stride = 1;
        s.validate().unwrap();
        let r = validate(&s, &device("akida_like")).unwrap();
        assert_eq!(r.violations.len(), 1, "{:?}", r.violations);
        assert_eq!((r.violations[0].constraint, r.violations[0].stage, r.violations[0].layer), ("pooling", 2, 3));
    }

    #[test]
    fn every_constraint_has_a_failing_fixture() {
        let lava_on_dynap = validate(&spec(Profile::LavaLike), &device("dynapcnn_like")).unwrap();
        let names: Vec<&str> = lava_on_dynap.violations.iter().map(|v| v.constraint).collect();
        assert!(names.contains(&"max_neurons_per_layer"));
        assert!(names.contains(&"neuron_mode"));

        let metatf_on_dynap = validate(&spec(Profile::MetatfLike), &device("dynapcnn_like")).unwrap();
        let names: Vec<&str> = metatf_on_dynap.violations.iter().map(|v| v.constraint).collect();
        assert!(names.contains(&"layer_kind"));
        assert!(names.contains(&"bias"));

        let sinabs_on_akida = validate(&spec(Profile::SinabsLike), &device("akida_like")).unwrap();
        let names: Vec<&str> = sinabs_on_akida.violations.iter().map(|v| v.constraint).collect();
        assert!(names.contains(&"weight_bits"));
        assert!(names.contains(&"pooling"));
    }

    #[test]
    fn profile_file_errors() {
        let good = "name = x\nmax_neurons_per_layer = 10\nlayer_kinds = conv2d\npooling = all\nbias = true\nweight_bits = 8\nneuron_modes = lif\n";
        assert!(DeviceProfile::parse(good, "p").is_ok());
        assert!(DeviceProfile::parse(&good.replace("pooling = all", "pooling = some"), "p").is_err());
        assert!(DeviceProfile::parse(&good.replace("conv2d", "deconv"), "p").is_err());
        assert!(DeviceProfile::parse(&good.replace("weight_bits = 8", "weight_bits = 0"), "p").is_err());
        assert!(DeviceProfile::parse(&good.replace("neuron_modes = lif", "neuron_modes = "), "p").is_err());
        assert!(DeviceProfile::parse(&good.replace("bias = true\n", ""), "p").is_err());
    }

    #[test]
    fn quantize_example() {
        let (q, scale) = quantize_kernel(&[-1.0, 0.5], 3).unwrap();
        assert!((scale - 1.0 / 3.0).abs() < 1e-15);
        // Levels are k/3 for k in -3..=3: 0.5 lies exactly between 1/3 and
        // 2/3 and rounds away from zero.
        assert_eq!(q[0], -1.0);
        assert!((q[1] - 2.0 / 3.0).abs() < 1e-15);
        let w = Weights { layers: vec![crate::network::LayerWeights { kernel: vec![-1.0, 0.5], ..Default::default() }] };
        let r = quantize_weights(&w, 3).unwrap();
        assert!((r.max_error[0] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn zero_layer_and_exact_levels() {
        let (q, s) = quantize_kernel(&[0.0, 0.0], 4).unwrap();
        assert_eq!((q, s), (vec![0.0, 0.0], 1.0));
        let levels = [-7.0, -3.0, 0.0, 2.0, 7.0];
        let (q, _) = quantize_kernel(&levels, 4).unwrap();
        assert_eq!(q, levels);
        assert!(quantize_kernel(&[1.0], 1).is_err());
    }

    proptest! {
        #[test]
        fn error_bound_and_idempotence(w in prop::collection::vec(-5.0f64..5.0, 1..64), bits in 2u32..12) {
            let (q, scale) = quantize_kernel(&w, bits).unwrap();
            for (a, b) in w.iter().zip(&q) {
                prop_assert!((a - b).abs() <= scale / 2.0 + 1e-12);
            }
            let (qq, _) = quantize_kernel(&q, bits).unwrap();
            for (a, b) in q.iter().zip(&qq) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
