//! Smooth stand-in for the derivative of the spike function.

pub const DEFAULT_GAMMA: f64 = 0.5;

/// Exponential bump `(1/γ)·exp(−|v − c|/γ)` around the nearest firing
/// point `c`. With `periodic` the bump repeats at every threshold multiple
/// (multi-spike neurons, `c = θ·max(round(v/θ), 1)`); otherwise it sits at
/// `c = θ`.
pub fn surrogate_grad(v: f64, threshold: f64, gamma: f64, periodic: bool) -> f64 {
    let center = if periodic { threshold * (v / threshold).round().max(1.0) } else { threshold };
    (-(v - center).abs() / gamma).exp() / gamma
}
