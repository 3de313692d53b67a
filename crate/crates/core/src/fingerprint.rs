//! Behavioural fingerprints: every client runs the same public probe inputs
//! through its local model, and the sentence-level vectors (position 0) are
//! summarized as a multivariate gaussian. Clients are compared with the
//! symmetric KL divergence between those gaussians.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};
use crate::model::{SplitModel, TrainableParams};
use crate::seed;

/// Shared probe inputs, identical for every client in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub inputs: Vec<Vec<u32>>,
    pub seed: u64,
}

/// Full-length probe sequences drawn uniformly from the non-padding vocabulary.
pub fn build_probe_set(seed_value: u64, count: usize, seq_len: usize, vocab: usize) -> Result<ProbeSet> {
    if count < 2 {
        return Err(ElsaError::Config(format!(
            "probe set needs at least 2 inputs for a covariance (got {count})"
        )));
    }
    if vocab < 2 || seq_len == 0 {
        return Err(ElsaError::Config("probe set needs vocab >= 2 and seq_len >= 1".into()));
    }
    let mut rng = seed::rng_for(&[seed::tag::PROBE, seed_value]);
    let inputs = (0..count)
        .map(|_| (0..seq_len).map(|_| rng.random_range(1..vocab as u32)).collect())
        .collect();
    Ok(ProbeSet { inputs, seed: seed_value })
}

/// How the covariance ridge is chosen: `max(floor, relative * tr(S) / D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgePolicy {
    pub floor: f64,
    pub relative: f64,
}

impl Default for RidgePolicy {
    fn default() -> Self {
        Self {
            floor: 1e-6,
            relative: 1e-3,
        }
    }
}

impl RidgePolicy {
    pub fn ridge_for(&self, cov: &DMatrix<f64>) -> f64 {
        let d = cov.nrows().max(1) as f64;
        self.floor.max(self.relative * cov.trace() / d)
    }
}

/// A gaussian `N(mean, cov)` with a positive definite `cov`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Per-client behavioural fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub mean: DVector<f64>,
    /// Empirical (biased) covariance, before the ridge.
    pub cov: DMatrix<f64>,
    /// Probe embeddings, one row per probe input.
    pub embeddings: DMatrix<f64>,
    pub ridge: f64,
}

impl Fingerprint {
    pub fn from_embeddings(t: DMatrix<f64>, policy: RidgePolicy) -> Result<Self> {
        let (q, d) = t.shape();
        if q < 2 || d == 0 {
            return Err(ElsaError::Input(format!("fingerprint needs >= 2 probe rows, got {q}")));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(ElsaError::Numeric("non-finite probe embedding".into()));
        }
        let mean = t.row_mean().transpose();
        let mut centered = t.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / q as f64;
        // exact symmetry regardless of summation order
        cov = (&cov + cov.transpose()) * 0.5;
        let ridge = policy.ridge_for(&cov);
        Ok(Self {
            mean,
            cov,
            embeddings: t,
            ridge,
        })
    }

    pub fn regularized_cov(&self) -> DMatrix<f64> {
        let d = self.cov.nrows();
        &self.cov + DMatrix::identity(d, d) * self.ridge
    }

    pub fn gaussian(&self) -> Gaussian {
        Gaussian {
            mean: self.mean.clone(),
            cov: self.regularized_cov(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean inverse norm of the probe embeddings.
    pub fn inverse_confidence(&self) -> Result<f64> {
        let mut acc = 0.0;
        for row in self.embeddings.row_iter() {
            let n = row.norm();
            if n <= 0.0 {
                return Err(ElsaError::Numeric("zero-norm probe embedding".into()));
            }
            acc += 1.0 / n;
        }
        Ok(acc / self.embeddings.nrows() as f64)
    }
}

/// Position-0 hidden vectors of the full local model over the probe set.
pub fn extract_fingerprint(
    model: &SplitModel,
    params: &TrainableParams,
    probe: &ProbeSet,
    policy: RidgePolicy,
) -> Result<Fingerprint> {
    let d = model.config().hidden_dim;
    let mut t = DMatrix::zeros(probe.inputs.len(), d);
    for (j, input) in probe.inputs.iter().enumerate() {
        let h = model.forward_hidden(params, input)?;
        if !h.is_finite() {
            return Err(ElsaError::Numeric("non-finite activation during fingerprinting".into()));
        }
        t.row_mut(j).copy_from(&h.values.row(0));
    }
    Fingerprint::from_embeddings(t, policy)
}

/// `KL(a || b)` in closed form using a Cholesky factor of `b.cov`.
pub fn kl_gaussian(a: &Gaussian, b: &Gaussian) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(ElsaError::Input("gaussian dimensions disagree".into()));
    }
    let chol_b = b
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| ElsaError::Numeric("covariance not positive definite".into()))?;
    let chol_a = a
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| ElsaError::Numeric("covariance not positive definite".into()))?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let logdet_a = logdet(&chol_a.l());
    let logdet_b = logdet(&chol_b.l());
    let trace = chol_b.solve(&a.cov).trace();
    let diff = &b.mean - &a.mean;
    let quad = diff.dot(&chol_b.solve(&diff));
    let kl = 0.5 * (trace - d as f64 + logdet_b - logdet_a + quad);
    if !kl.is_finite() {
        return Err(ElsaError::Numeric("non-finite KL divergence".into()));
    }
    Ok(kl.max(0.0))
}

pub fn kl_gauss(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    kl_gaussian(&a.gaussian(), &b.gaussian())
}

pub fn sym_kl_gaussian(a: &Gaussian, b: &Gaussian) -> Result<f64> {
    Ok(kl_gaussian(a, b)? + kl_gaussian(b, a)?)
}

/// `KL(a || b) + KL(b || a)`.
pub fn sym_kl(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    sym_kl_gaussian(&a.gaussian(), &b.gaussian())
}

/// Pairwise symmetric KL between clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMatrix {
    pub values: DMatrix<f64>,
}

impl DivergenceMatrix {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values[(a, b)]
    }

    /// Mean divergence of client `n` to every other client.
    pub fn mean_divergence(&self, n: usize) -> f64 {
        let others = self.len().saturating_sub(1);
        if others == 0 {
            return 0.0;
        }
        (0..self.len()).filter(|&m| m != n).map(|m| self.get(n, m)).sum::<f64>() / others as f64
    }

    /// Plain CSV: no header, one row per client, `%.10e` values.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.len() {
            let row: Vec<String> = (0..self.len()).map(|j| format!("{:.10e}", self.get(i, j))).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn divergence_matrix(fps: &[Fingerprint]) -> Result<DivergenceMatrix> {
    if fps.len() < 2 {
        return Err(ElsaError::Input("divergence matrix needs at least 2 fingerprints".into()));
    }
    let n = fps.len();
    let gs: Vec<Gaussian> = fps.iter().map(Fingerprint::gaussian).collect();
    let mut values = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let r = sym_kl_gaussian(&gs[i], &gs[j])?;
            values[(i, j)] = r;
            values[(j, i)] = r;
        }
    }
    Ok(DivergenceMatrix { values })
}

/// The two exponent terms of the trust score for every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustTerms {
    pub inverse_confidence: Vec<f64>,
    pub mean_divergence: Vec<f64>,
}

pub fn trust_terms(fps: &[Fingerprint], r: &DivergenceMatrix) -> Result<TrustTerms> {
    if fps.len() != r.len() {
        return Err(ElsaError::Input(format!(
            "{} fingerprints but a {}x{} divergence matrix",
            fps.len(),
            r.len(),
            r.len()
        )));
    }
    Ok(TrustTerms {
        inverse_confidence: fps.iter().map(Fingerprint::inverse_confidence).collect::<Result<_>>()?,
        mean_divergence: (0..r.len()).map(|n| r.mean_divergence(n)).collect(),
    })
}

fn normalize_by_mean(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
    if mean > 0.0 {
        v.iter().map(|x| x / mean).collect()
    } else {
        v.to_vec()
    }
}

/// `exp(-c_n - rbar_n)`, optionally with each term divided by its mean
/// across clients (skipped when that mean is zero).
pub fn trust_scores(fps: &[Fingerprint], r: &DivergenceMatrix, normalize: bool) -> Result<Vec<f64>> {
    let terms = trust_terms(fps, r)?;
    let (c, rbar) = if normalize {
        (
            normalize_by_mean(&terms.inverse_confidence),
            normalize_by_mean(&terms.mean_divergence),
        )
    } else {
        (terms.inverse_confidence, terms.mean_divergence)
    };
    Ok(c.iter().zip(&rbar).map(|(a, b)| (-a - b).exp()).collect())
}

pub fn trust_score(n: usize, fps: &[Fingerprint], r: &DivergenceMatrix, normalize: bool) -> Result<f64> {
    trust_scores(fps, r, normalize)?
        .get(n)
        .copied()
        .ok_or_else(|| ElsaError::Input(format!("client {n} out of range")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gauss1(mean: f64, var: f64) -> Gaussian {
        Gaussian {
            mean: DVector::from_element(1, mean),
            cov: DMatrix::from_element(1, 1, var),
        }
    }

    fn planted(mean_shift: f64, s: u64, q: usize, d: usize) -> Fingerprint {
        let mut rng = seed::rng(s);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let t = DMatrix::from_fn(q, d, |_, j| normal.sample(&mut rng) + if j == 0 { mean_shift } else { 0.0 } + 5.0);
        Fingerprint::from_embeddings(t, RidgePolicy::default()).unwrap()
    }

    #[test]
    fn probe_set_contract() {
        let p = build_probe_set(3, 16, 8, 64).unwrap();
        assert_eq!(p.inputs.len(), 16);
        assert!(p.inputs.iter().all(|s| s.len() == 8 && s.iter().all(|t| *t < 64)));
        assert_eq!(p, build_probe_set(3, 16, 8, 64).unwrap());
        assert_ne!(p.inputs, build_probe_set(4, 16, 8, 64).unwrap().inputs);
        assert!(build_probe_set(3, 1, 8, 64).is_err());
    }

    #[test]
    fn one_dimensional_closed_forms() {
        let kl = kl_gaussian(&gauss1(0.0, 1.0), &gauss1(1.0, 1.0)).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        let kl = kl_gaussian(&gauss1(0.0, 1.0), &gauss1(0.0, 4.0)).unwrap();
        assert!((kl - 0.5 * (0.25 - 1.0 + 4f64.ln())).abs() < 1e-12);
        let s = sym_kl_gaussian(&gauss1(0.0, 1.0), &gauss1(1.0, 1.0)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_and_zero_variance() {
        let a = planted(0.0, 1, 20, 4);
        assert!(kl_gauss(&a, &a).unwrap().abs() < 1e-9);
        assert_eq!(sym_kl(&a, &a).unwrap(), 0.0);
        let mean_err = (&a.mean - a.embeddings.row_mean().transpose()).amax();
        assert!(mean_err < 1e-12);

        let flat = DMatrix::from_fn(5, 3, |_, j| j as f64);
        let f = Fingerprint::from_embeddings(flat, RidgePolicy::default()).unwrap();
        assert!(f.cov.amax() == 0.0);
        assert_eq!(f.ridge, 1e-6);
        assert_eq!(f.regularized_cov(), DMatrix::identity(3, 3) * 1e-6);
    }

    #[test]
    fn planted_outlier_is_farther() {
        let fps = vec![planted(0.0, 1, 40, 3), planted(0.0, 2, 40, 3), planted(6.0, 3, 40, 3)];
        let r = divergence_matrix(&fps).unwrap();
        assert!(r.get(0, 2) > r.get(0, 1));
        assert!(r.get(1, 2) > r.get(0, 1));
        assert!((&r.values - r.values.transpose()).amax() < 1e-9);
        for i in 0..3 {
            assert_eq!(r.get(i, i), 0.0);
        }
    }

    #[test]
    fn identical_population_trust() {
        let fps = vec![planted(0.0, 1, 10, 3); 4];
        let r = divergence_matrix(&fps).unwrap();
        assert!(r.values.iter().all(|v| *v == 0.0));
        for t in trust_scores(&fps, &r, true).unwrap() {
            assert!((t - (-1.0f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn outlier_row_gets_lowest_trust() {
        // equal confidence terms: identical embedding norms
        let fps = vec![planted(0.0, 1, 30, 3); 3];
        let r = DivergenceMatrix {
            values: DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 9.0, 1.0, 0.0, 8.0, 9.0, 8.0, 0.0]),
        };
        let t = trust_scores(&fps, &r, false).unwrap();
        assert!(t[2] < t[0] && t[2] < t[1]);
        assert_eq!(trust_score(2, &fps, &r, false).unwrap(), t[2]);
    }

    #[test]
    fn zero_norm_embedding_is_numeric_error() {
        let mut t = DMatrix::from_element(3, 2, 1.0);
        t.row_mut(1).fill(0.0);
        let f = Fingerprint::from_embeddings(t, RidgePolicy::default()).unwrap();
        assert!(matches!(f.inverse_confidence(), Err(ElsaError::Numeric(_))));
    }

    #[test]
    fn csv_dump_shape() {
        let r = DivergenceMatrix {
            values: DMatrix::from_row_slice(2, 2, &[0.0, 1.5, 1.5, 0.0]),
        };
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("0.0000000000e0,1.5000000000e0"));
    }
}
