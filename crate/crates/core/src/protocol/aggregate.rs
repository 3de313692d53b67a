//! Edge consolidation, cloud weighting and the stopping rule.

use crate::error::{ElsaError, Result};
use crate::model::{BlockAdapter, TrainableParams};

/// `theta1`, `theta3` and the head are averaged over the clients weighted by
/// their data sizes; `theta2` is the edge's own copy.
pub fn edge_consolidate(clients: &[(&TrainableParams, usize)], theta2: &[BlockAdapter]) -> Result<TrainableParams> {
    let total: usize = clients.iter().map(|(_, n)| n).sum();
    let Some((first, _)) = clients.first() else {
        return Err(ElsaError::Aggregation("edge has no clients to consolidate".into()));
    };
    if total == 0 {
        return Err(ElsaError::Aggregation("edge clients hold no data".into()));
    }
    let mut out = first.zeros_like();
    for (p, n) in clients {
        if !p.same_shape(first) {
            return Err(ElsaError::Aggregation("client adapter shapes differ".into()));
        }
        out.axpy(*n as f64 / total as f64, p);
    }
    if theta2.len() != out.theta2.len() {
        return Err(ElsaError::Aggregation("edge adapter has the wrong block count".into()));
    }
    out.theta2 = theta2.to_vec();
    Ok(out)
}

/// `w_k / (1 + R_k)`.
pub fn compute_alpha(coherence: f64, mean_trust: f64) -> Result<f64> {
    if !(coherence >= 0.0) || !(mean_trust >= 0.0) || !coherence.is_finite() || !mean_trust.is_finite() {
        return Err(ElsaError::Aggregation(format!(
            "invalid edge statistics (coherence {coherence}, trust {mean_trust})"
        )));
    }
    Ok(mean_trust / (1.0 + coherence))
}

pub fn normalize_alphas(alphas: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = alphas.iter().sum();
    if alphas.iter().any(|a| !(*a >= 0.0)) || !(sum > 0.0) || !sum.is_finite() {
        return Err(ElsaError::Aggregation("aggregation weights are all zero or invalid".into()));
    }
    Ok(alphas.iter().map(|a| a / sum).collect())
}

/// Element-wise convex combination of the edge models.
pub fn global_aggregate(edges: &[TrainableParams], weights: &[f64]) -> Result<TrainableParams> {
    let Some(first) = edges.first() else {
        return Err(ElsaError::Aggregation("no edge models to aggregate".into()));
    };
    if edges.len() != weights.len() {
        return Err(ElsaError::Aggregation(format!(
            "{} edge models but {} weights",
            edges.len(),
            weights.len()
        )));
    }
    let mut out = first.zeros_like();
    for (p, w) in edges.iter().zip(weights) {
        if !p.same_shape(first) {
            return Err(ElsaError::Aggregation("edge adapter shapes differ".into()));
        }
        out.axpy(*w, p);
    }
    Ok(out)
}

/// L2 norm of the flattened difference.
pub fn param_distance(a: &TrainableParams, b: &TrainableParams) -> f64 {
    a.to_flat()
        .iter()
        .zip(b.to_flat())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// True iff a predecessor exists and the step is at most `xi`.
pub fn check_convergence(current: &TrainableParams, previous: Option<&TrainableParams>, xi: f64) -> bool {
    previous.is_some_and(|p| param_distance(current, p) <= xi)
}
