#![allow(dead_code)]

use evsnn::event_pipeline::LabeledSample;
use evsnn::synth::{make_dataset, random_sims, NoiseModel, SynthConfig, SyntheticDataset};

/// `train` trajectories plus four each for validation and test, 50 windows
/// per trajectory.
pub fn synthetic(train: usize, seed: u64, noise: NoiseModel) -> SyntheticDataset {
    let total = (train + 8) as f64;
    let config = SynthConfig { noise, ratios: [train as f64 / total, 4.0 / total, 4.0 / total], seed, ..SynthConfig::default() };
    let sims = random_sims(train + 8, config.sensor, seed);
    make_dataset(&sims, &config).expect("synthetic dataset")
}

pub struct Splits {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

pub fn splits(ds: &SyntheticDataset) -> Splits {
    Splits {
        train: ds.train.samples().unwrap(),
        val: ds.val.samples().unwrap(),
        test: ds.test.samples().unwrap(),
    }
}

use evsnn::network::{Activation, LayerSpec, NetworkSpec, Profile, Weights};
use evsnn::training::{loss_and_gradient, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn binary_frame(rng: &mut ChaCha8Rng, density: f64) -> Vec<f64> {
    (0..4096).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect()
}

/// A 3-layer multi-spike IF stack whose every activation is a multiple of
/// `1 / steps`: first-layer currents are multiples of `1 / steps` and deeper
/// weights are small non-negative integers.
pub fn rate_code_fixture(seed: u64, steps: usize) -> (NetworkSpec, Weights, Vec<f64>) {
    let ifn = Activation::IfMultispike { threshold: 1.0 };
    let spec = NetworkSpec::custom(
        vec![
            LayerSpec::conv(2, 4, 4).with_activation(ifn),
            LayerSpec::linear(16).with_activation(ifn),
            LayerSpec::linear(128).with_activation(ifn),
        ],
        steps,
        8,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = Weights::init(&spec, seed).unwrap();
    w.layers[0].kernel.iter_mut().for_each(|v| *v = rng.random_range(-6i32..=8) as f64 / steps as f64);
    for lw in &mut w.layers[1..] {
        lw.kernel.iter_mut().for_each(|v| *v = if rng.random_bool(0.2) { rng.random_range(1..=2) as f64 } else { 0.0 });
    }
    let input = binary_frame(&mut rng, 0.2);
    (spec, w, input)
}

/// conv(1, 5x5, stride 4) → maxpool 2 → linear(2) → linear(128), with
/// bias, batch norm and quantized ReLU on the hidden layers.
pub fn small_quantized_net(weight_bits: u32) -> NetworkSpec {
    let q = Activation::QuantizedRelu { bits: 4, range_max: 2.0 };
    let mut spec = NetworkSpec::custom(
        vec![
            LayerSpec::conv(1, 5, 4).with_bias().with_batchnorm().with_activation(q),
            LayerSpec::max_pool(2),
            LayerSpec::linear(2).with_bias().with_batchnorm().with_activation(q),
            LayerSpec::linear(128),
        ],
        1,
        weight_bits,
    )
    .unwrap();
    spec.profile = Profile::Custom;
    spec
}

/// Worst relative error between float-path analytic gradients and central
/// differences with step `h`, over every trainable parameter of
/// [`small_quantized_net`]. Returns the error and the parameter count.
pub fn gradient_check(seed: u64, samples: &[LabeledSample], h: f64) -> (f64, usize) {
    let spec = small_quantized_net(8);
    let mut w = Weights::init(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for lw in &mut w.layers {
        if let Some(b) = &mut lw.bias {
            b.iter_mut().for_each(|v| *v = rng.random_range(0.2..0.6));
        }
        if let Some(bn) = &mut lw.bn {
            for c in 0..bn.gamma.len() {
                bn.gamma[c] = rng.random_range(0.5..1.5);
                bn.beta[c] = rng.random_range(0.3..0.8);
                bn.mean[c] = rng.random_range(-0.1..0.1);
                bn.var[c] = rng.random_range(0.5..1.5);
            }
        }
    }
    let cfg = TrainConfig { lambda_synops: 0.0, lambda_weightmax: 0.0, ..TrainConfig::for_profile(Profile::Custom) };
    let (_, grads) = loss_and_gradient(&spec, &w, samples, &cfg, true).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..w.trainable().len() {
        for i in 0..w.trainable()[t].len() {
            let orig = w.trainable()[t][i];
            w.trainable_mut()[t][i] = orig + h;
            let up = loss_and_gradient(&spec, &w, samples, &cfg, true).unwrap().0.total;
            w.trainable_mut()[t][i] = orig - h;
            let down = loss_and_gradient(&spec, &w, samples, &cfg, true).unwrap().0.total;
            w.trainable_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.trainable()[t][i];
            worst = worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6));
        }
    }
    (worst, w.parameter_count())
}
