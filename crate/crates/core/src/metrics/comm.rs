//! Closed-form communication cost and time.

use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommModel {
    /// Bytes per transmitted value.
    pub zeta: f64,
    pub seq_len: f64,
    /// Compression ratio `D / (Y * Z)`; 1 means uncompressed.
    pub rho: f64,
    /// Effective bandwidth in bytes per second.
    pub bandwidth: f64,
    /// Size of one uploaded adapter set, in bytes.
    pub lora_bytes: f64,
}

impl CommModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.zeta, self.seq_len, self.rho, self.bandwidth];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !(self.lora_bytes >= 0.0) {
            return Err(ElsaError::Config(
                "comm model needs positive zeta, seq_len, rho, bandwidth and non-negative lora_bytes".into(),
            ));
        }
        Ok(())
    }
}

/// Bytes of one global round: boundary activations in both directions for
/// every clustered client's batches over `rounds` local rounds, plus one
/// adapter upload per edge.
pub fn comm_cost(m: &CommModel, n_edges: usize, batch_sizes: &[f64], rounds: f64, hidden: f64) -> f64 {
    let per_sample = 2.0 * rounds * m.zeta * m.seq_len * hidden / m.rho;
    per_sample * batch_sizes.iter().sum::<f64>() + n_edges as f64 * m.lora_bytes
}

/// Transfer time of one client's boundary traffic in a global round.
pub fn comm_time(m: &CommModel, rounds: f64, batch: f64, hidden: f64) -> f64 {
    2.0 * rounds * batch * m.seq_len * m.zeta * hidden / (m.rho * m.bandwidth)
}

/// Straggler-bound total: `G * max_n T_n` (0 when there are no clients).
pub fn total_time(global_rounds: f64, times: &[f64]) -> f64 {
    global_rounds * times.iter().copied().fold(0.0, f64::max)
}
