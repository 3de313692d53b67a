//! Convergence bound calculator.

use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// Smoothness constant.
    pub smoothness: f64,
    /// Initial optimality gap `F(theta_0) - F*`.
    pub gap: f64,
    /// Local noise variance (mini-batch noise plus codec error).
    pub sigma_local_sq: f64,
    /// Non-IID bias.
    pub sigma2_sq: f64,
    pub rounds: f64,
}

/// `4 L gap / sqrt(G) + sigma_local^2 / sqrt(G) + sigma_2^2`.
pub fn theorem_bound(b: &BoundInputs) -> Result<f64> {
    if !(b.rounds >= 1.0) {
        return Err(ElsaError::Input(format!("bound needs G >= 1 (got {})", b.rounds)));
    }
    let rest = [b.smoothness, b.gap, b.sigma_local_sq, b.sigma2_sq];
    if rest.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(ElsaError::Input("bound inputs must be finite and >= 0".into()));
    }
    let sg = b.rounds.sqrt();
    Ok(4.0 * b.smoothness * b.gap / sg + b.sigma_local_sq / sg + b.sigma2_sq)
}

/// `sigma_1^2 + L^2 * delta^2`, with `delta^2` the codec error.
pub fn local_noise(sigma1_sq: f64, smoothness: f64, codec_error_sq: f64) -> f64 {
    sigma1_sq + smoothness * smoothness * codec_error_sq
}

/// Running mean of a trace: entry `i` averages `trace[..=i]`.
pub fn running_average(trace: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    trace
        .iter()
        .enumerate()
        .map(|(i, v)| {
            acc += v;
            acc / (i + 1) as f64
        })
        .collect()
}
