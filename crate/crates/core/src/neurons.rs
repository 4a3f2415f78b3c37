//! Discrete-time neuron dynamics.
//!
//! Three activation models are supported:
//!
//! * multi-spike integrate-and-fire: every step emits `floor(v / θ)` spikes
//!   and subtracts their charge, so a constant input `x` is reproduced as a
//!   rate of `x / θ` without the one-spike-per-step ceiling;
//! * leaky integrate-and-fire with at most one spike per step;
//! * the step-wise quantized ReLU that collapses the rate code into one step.

use crate::error::{Error, Result};

/// Relative slack on the threshold comparison. Repeated float accumulation
/// can land a hair below an exact multiple of θ (ten steps of 0.3 sum to
/// 0.9999999999999998); those cases still fire.
pub const FIRE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeuronMode {
    IfMultispike,
    LifSingle,
    QuantizedRelu,
}

impl NeuronMode {
    pub fn name(self) -> &'static str {
        match self {
            NeuronMode::IfMultispike => "if_multispike",
            NeuronMode::LifSingle => "lif",
            NeuronMode::QuantizedRelu => "quantized_relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "if_multispike" => Some(NeuronMode::IfMultispike),
            "lif" => Some(NeuronMode::LifSingle),
            "quantized_relu" => Some(NeuronMode::QuantizedRelu),
            _ => None,
        }
    }

    pub fn is_spiking(self) -> bool {
        !matches!(self, NeuronMode::QuantizedRelu)
    }
}

/// What happens to the membrane after a spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResetMode {
    /// `v -= n * θ`; keeps the residual charge.
    #[default]
    Subtract,
    Zero,
}

/// Membrane potentials of one layer plus its dynamics parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub membrane: Vec<f64>,
    pub threshold: f64,
    /// Fraction of the membrane lost per step (0 for non-leaky neurons).
    pub decay: f64,
    pub mode: NeuronMode,
    pub reset: ResetMode,
}

impl NeuronState {
    pub fn new(mode: NeuronMode, neurons: usize, threshold: f64, decay: f64) -> Result<Self> {
        if threshold <= 0.0 || !threshold.is_finite() {
            return Err(Error::InvalidArgument(format!("threshold must be positive, got {threshold}")));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self {
            membrane: vec![0.0; neurons],
            threshold,
            decay,
            mode,
            reset: ResetMode::Subtract,
        })
    }

    pub fn if_multispike(neurons: usize, threshold: f64) -> Result<Self> {
        Self::new(NeuronMode::IfMultispike, neurons, threshold, 0.0)
    }

    pub fn lif(neurons: usize, threshold: f64, decay: f64) -> Result<Self> {
        Self::new(NeuronMode::LifSingle, neurons, threshold, decay)
    }

    pub fn len(&self) -> usize {
        self.membrane.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membrane.is_empty()
    }

    pub fn reset_state(&mut self) {
        self.membrane.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Advances one step. `spikes[i]` receives the spike count of neuron `i`
    /// and, when given, `pre_spike[i]` the membrane after integration but
    /// before reset (what surrogate gradients are evaluated at).
    pub fn step_into(&mut self, input: &[f64], spikes: &mut [f64], mut pre_spike: Option<&mut [f64]>) -> Result<()> {
        if input.len() != self.membrane.len() || spikes.len() != self.membrane.len() {
            return Err(Error::Shape(format!(
                "layer has {} neurons, input {} and output {}",
                self.membrane.len(),
                input.len(),
                spikes.len()
            )));
        }
        let theta = self.threshold;
        let keep = 1.0 - self.decay;
        let fire_at = theta * (1.0 - FIRE_TOLERANCE);
        let multispike = match self.mode {
            NeuronMode::IfMultispike => true,
            NeuronMode::LifSingle => false,
            NeuronMode::QuantizedRelu => {
                return Err(Error::InvalidArgument("quantized ReLU layers have no membrane state".into()))
            }
        };
        for i in 0..input.len() {
            let x = input[i];
            if !x.is_finite() {
                return Err(Error::NonFinite("neuron input"));
            }
            let v = keep * self.membrane[i] + x;
            if let Some(pre) = pre_spike.as_deref_mut() {
                pre[i] = v;
            }
            let n = if v >= fire_at {
                if multispike {
                    (v / theta + FIRE_TOLERANCE).floor()
                } else {
                    1.0
                }
            } else {
                0.0
            };
            self.membrane[i] = match (n > 0.0, self.reset) {
                (false, _) => v,
                (true, ResetMode::Subtract) => v - n * theta,
                (true, ResetMode::Zero) => 0.0,
            };
            spikes[i] = n;
        }
        Ok(())
    }

    fn step_counts(&mut self, expected: NeuronMode, input: &[f64]) -> Result<Vec<u32>> {
        if self.mode != expected {
            return Err(Error::InvalidArgument(format!(
                "neuron state is {}, not {}",
                self.mode.name(),
                expected.name()
            )));
        }
        let mut out = vec![0.0; input.len()];
        self.step_into(input, &mut out, None)?;
        Ok(out.into_iter().map(|n| n as u32).collect())
    }
}

/// `v += input`, then emits `floor(v / θ)` spikes per neuron and subtracts
/// their charge.
pub fn step_if_multispike(state: &mut NeuronState, input: &[f64]) -> Result<Vec<u32>> {
    state.step_counts(NeuronMode::IfMultispike, input)
}

/// `v = (1 - β) v + input`; at most one spike per step.
pub fn step_lif(state: &mut NeuronState, input: &[f64]) -> Result<Vec<u32>> {
    state.step_counts(NeuronMode::LifSingle, input)
}

/// Clipped ReLU rounded onto a uniform grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizedRelu {
    /// `None` keeps full precision (plain clipped ReLU).
    pub bits: Option<u32>,
    pub range_max: f64,
}

impl QuantizedRelu {
    pub fn new(bits: Option<u32>, range_max: f64) -> Result<Self> {
        if bits == Some(0) {
            return Err(Error::InvalidArgument("quantized ReLU needs at least one bit".into()));
        }
        if range_max <= 0.0 || !range_max.is_finite() {
            return Err(Error::InvalidArgument(format!("range_max must be positive, got {range_max}")));
        }
        Ok(Self { bits, range_max })
    }

    /// Distance between adjacent output levels.
    pub fn step(&self) -> Option<f64> {
        self.bits.map(|b| self.range_max / ((1u64 << b) - 1) as f64)
    }

    pub fn apply(&self, x: f64) -> f64 {
        let clipped = x.clamp(0.0, self.range_max);
        match self.step() {
            Some(step) => (clipped / step).round() * step,
            None => clipped,
        }
    }

    /// Straight-through gradient: 1 inside the clamp range, 0 outside.
    pub fn pass_through(&self, x: f64) -> bool {
        (0.0..=self.range_max).contains(&x)
    }
}

pub fn quantized_relu(x: &[f64], bits: u32, range_max: f64) -> Result<Vec<f64>> {
    let q = QuantizedRelu::new(Some(bits), range_max)?;
    Ok(x.iter().map(|&v| q.apply(v)).collect())
}

/// Spike counts of one layer over `steps` time steps, stored step-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTensor {
    steps: usize,
    width: usize,
    counts: Vec<u32>,
}

impl SpikeTensor {
    pub fn zeros(steps: usize, width: usize) -> Self {
        Self { steps, width, counts: vec![0; steps * width] }
    }

    pub fn from_counts(steps: usize, width: usize, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != steps * width {
            return Err(Error::Shape(format!("{} counts for {steps}x{width}", counts.len())));
        }
        Ok(Self { steps, width, counts })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn step(&self, t: usize) -> &[u32] {
        &self.counts[t * self.width..(t + 1) * self.width]
    }

    pub fn step_mut(&mut self, t: usize) -> &mut [u32] {
        &mut self.counts[t * self.width..(t + 1) * self.width]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }
}

/// Per-neuron spike count divided by the number of steps.
pub fn rate(spikes: &SpikeTensor) -> Result<Vec<f64>> {
    if spikes.steps == 0 {
        return Err(Error::InvalidArgument("rate needs at least one time step".into()));
    }
    let mut totals = vec![0u64; spikes.width];
    for t in 0..spikes.steps {
        for (acc, &c) in totals.iter_mut().zip(spikes.step(t)) {
            *acc += c as u64;
        }
    }
    let steps = spikes.steps as f64;
    Ok(totals.into_iter().map(|c| c as f64 / steps).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn multispike_floor_and_subtract() {
        let mut s = NeuronState::if_multispike(1, 1.0).unwrap();
        assert_eq!(step_if_multispike(&mut s, &[2.7]).unwrap(), vec![2]);
        assert!((s.membrane[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn multispike_small_constant_input() {
        // Exact-arithmetic reference: the membrane walks 0.3, 0.6, 0.9, 1.2 -> fire
        // (0.2), ..., reaching exactly 1.0 at step 10, for 3 spikes in total.
        let mut reference_v = 0.0f64;
        let mut reference_spikes = 0;
        for _ in 0..10 {
            reference_v += 3.0;
            if reference_v >= 10.0 {
                reference_v -= 10.0;
                reference_spikes += 1;
            }
        }
        assert_eq!(reference_spikes, 3);

        let mut s = NeuronState::if_multispike(1, 1.0).unwrap();
        let total: u32 = (0..10).map(|_| step_if_multispike(&mut s, &[0.3]).unwrap()[0]).sum();
        assert_eq!(total, reference_spikes);
        assert!(s.membrane[0].abs() < 1e-12);
    }

    #[test]
    fn zero_input_is_fixed_point() {
        let mut s = NeuronState::if_multispike(3, 1.0).unwrap();
        assert_eq!(step_if_multispike(&mut s, &[0.0; 3]).unwrap(), vec![0, 0, 0]);
        assert_eq!(s.membrane, vec![0.0; 3]);
        let mut l = NeuronState::lif(2, 0.25, 0.3).unwrap();
        assert_eq!(step_lif(&mut l, &[0.0; 2]).unwrap(), vec![0, 0]);
        assert_eq!(l.membrane, vec![0.0; 2]);
    }

    #[test]
    fn lif_decays() {
        let mut s = NeuronState::lif(1, 0.25, 0.05).unwrap();
        s.membrane[0] = 0.2;
        assert_eq!(step_lif(&mut s, &[0.0]).unwrap(), vec![0]);
        assert!((s.membrane[0] - 0.19).abs() < 1e-12);
    }

    #[test]
    fn lif_fires_once_and_subtracts() {
        let mut s = NeuronState::lif(1, 0.25, 0.05).unwrap();
        assert_eq!(step_lif(&mut s, &[0.3]).unwrap(), vec![1]);
        assert!((s.membrane[0] - 0.05).abs() < 1e-12);
        let mut big = NeuronState::lif(1, 0.25, 0.05).unwrap();
        assert_eq!(step_lif(&mut big, &[10.0]).unwrap(), vec![1]);
    }

    #[test]
    fn zero_reset_switch() {
        let mut s = NeuronState::if_multispike(1, 1.0).unwrap();
        s.reset = ResetMode::Zero;
        assert_eq!(step_if_multispike(&mut s, &[2.7]).unwrap(), vec![2]);
        assert_eq!(s.membrane[0], 0.0);
    }

    #[test]
    fn errors() {
        let mut s = NeuronState::if_multispike(1, 1.0).unwrap();
        assert!(matches!(step_if_multispike(&mut s, &[f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(step_if_multispike(&mut s, &[f64::INFINITY]), Err(Error::NonFinite(_))));
        assert!(step_lif(&mut s, &[0.1]).is_err());
        assert!(step_if_multispike(&mut s, &[0.1, 0.2]).is_err());
        assert!(NeuronState::if_multispike(1, 0.0).is_err());
        assert!(NeuronState::lif(1, 0.25, 1.0).is_err());
    }

    #[test]
    fn quantized_relu_examples() {
        assert_eq!(quantized_relu(&[-1.0], 4, 2.0).unwrap(), vec![0.0]);
        assert_eq!(quantized_relu(&[7.0], 4, 2.0).unwrap(), vec![2.0]);
        // Levels for 2 bits over [0, 1]: 0, 1/3, 2/3, 1; 0.4 is nearest to 1/3.
        let levels: Vec<f64> = (0..4).map(|k| k as f64 / 3.0).collect();
        let nearest = *levels
            .iter()
            .min_by(|a, b| (*a - 0.4).abs().total_cmp(&(*b - 0.4).abs()))
            .unwrap();
        let got = quantized_relu(&[0.4], 2, 1.0).unwrap()[0];
        assert!((got - nearest).abs() < 1e-15);
        assert!((got - 1.0 / 3.0).abs() < 1e-15);
        assert!(quantized_relu(&[0.0], 0, 1.0).is_err());
        assert!(quantized_relu(&[0.0], 2, 0.0).is_err());
    }

    #[test]
    fn rate_examples() {
        let mut t = SpikeTensor::zeros(8, 1);
        for step in [0, 2, 4, 6] {
            t.step_mut(step)[0] = 1;
        }
        assert_eq!(rate(&t).unwrap(), vec![0.5]);
        assert_eq!(rate(&SpikeTensor::zeros(3, 2)).unwrap(), vec![0.0, 0.0]);
        assert!(rate(&SpikeTensor::zeros(0, 2)).is_err());

        let mut s = NeuronState::if_multispike(1, 1.0).unwrap();
        let mut spikes = SpikeTensor::zeros(4, 1);
        for step in 0..4 {
            spikes.step_mut(step)[0] = step_if_multispike(&mut s, &[2.5]).unwrap()[0];
        }
        assert_eq!(rate(&spikes).unwrap(), vec![2.5]);
    }

    #[test]
    fn charge_is_conserved() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2_000 {
            let steps = rng.random_range(1..40);
            let mut s = NeuronState::if_multispike(1, 1.0).unwrap();
            let mut total_in = 0.0;
            let mut total_spikes = 0u32;
            for _ in 0..steps {
                let x: f64 = rng.random_range(0.0..3.0);
                total_in += x;
                total_spikes += step_if_multispike(&mut s, &[x]).unwrap()[0];
            }
            assert!((total_spikes as f64 + s.membrane[0] - total_in).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn rate_tracks_relu(x in 0.0f64..6.0, steps in 1usize..64) {
            let mut s = NeuronState::if_multispike(1, 1.0).unwrap();
            let mut total = 0u32;
            for _ in 0..steps {
                total += step_if_multispike(&mut s, &[x]).unwrap()[0];
            }
            let r = total as f64 / steps as f64;
            prop_assert!((r - x).abs() <= 1.0 / steps as f64 + 1e-12);
        }

        #[test]
        fn exact_rate_on_grid(k in 0u32..400, steps in prop::sample::select(vec![1usize, 2, 4, 8, 16, 32, 64])) {
            let x = k as f64 / steps as f64;
            let mut s = NeuronState::if_multispike(1, 1.0).unwrap();
            let total: u32 = (0..steps).map(|_| step_if_multispike(&mut s, &[x]).unwrap()[0]).sum();
            prop_assert_eq!(total as f64 / steps as f64, x);
        }

        #[test]
        fn lif_leaks_without_input(v0 in -3.0f64..3.0, decay in 0.0f64..0.99, steps in 1usize..50) {
            let mut s = NeuronState::lif(1, 10.0, decay).unwrap();
            s.membrane[0] = v0;
            let mut prev = v0.abs();
            for _ in 0..steps {
                let out = step_lif(&mut s, &[0.0]).unwrap();
                prop_assert!(out[0] <= 1);
                prop_assert!(s.membrane[0].abs() <= prev);
                prev = s.membrane[0].abs();
            }
        }

        #[test]
        fn lif_single_spike_bound(inputs in prop::collection::vec(-2.0f64..20.0, 1..60)) {
            let mut s = NeuronState::lif(1, 0.25, 0.05).unwrap();
            for x in inputs {
                prop_assert!(step_lif(&mut s, &[x]).unwrap()[0] <= 1);
            }
        }
    }
}
