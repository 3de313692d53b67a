//! Independent oracles shared by the integration tests. None of these call
//! into the code paths they check.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random SPD matrix with eigenvalues roughly in `[0.3, 3]`.
pub fn random_spd(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, d, d);
    let q = a.qr().q();
    let diag = DVector::from_fn(d, |_, _| rng.random_range(0.3..3.0));
    &q * DMatrix::from_diagonal(&diag) * q.transpose()
}

/// Log-density of `N(mean, cov)` via an explicit inverse and determinant.
fn log_density(x: &DVector<f64>, mean: &DVector<f64>, inv: &DMatrix<f64>, det: f64) -> f64 {
    let d = x - mean;
    let k = x.len() as f64;
    -0.5 * ((d.transpose() * inv * &d)[(0, 0)] + det.ln() + k * (2.0 * std::f64::consts::PI).ln())
}

/// Monte-Carlo estimate of `KL(a || b)` from `n` samples of `a`.
pub fn mc_kl(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
    n: usize,
    seed: u64,
) -> f64 {
    let mut r = rng(seed);
    let la = cov_a.clone().cholesky().expect("spd").l();
    let (inv_a, det_a) = (cov_a.clone().try_inverse().unwrap(), cov_a.determinant());
    let (inv_b, det_b) = (cov_b.clone().try_inverse().unwrap(), cov_b.determinant());
    let d = mean_a.len();
    let mut acc = 0.0;
    for _ in 0..n {
        let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut r));
        let x = mean_a + &la * z;
        acc += log_density(&x, mean_a, &inv_a, det_a) - log_density(&x, mean_b, &inv_b, det_b);
    }
    acc / n as f64
}

/// Normalized cut of the 2-partition `in_s` over affinity `w`.
pub fn ncut(w: &DMatrix<f64>, in_s: &[bool]) -> f64 {
    let n = w.nrows();
    let (mut cut, mut vol_s, mut vol_t) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if in_s[i] {
                vol_s += w[(i, j)];
            } else {
                vol_t += w[(i, j)];
            }
            if in_s[i] && !in_s[j] {
                cut += w[(i, j)];
            }
        }
    }
    cut / vol_s + cut / vol_t
}

/// Best 2-partition by normalized cut over all `2^(n-1) - 1` splits.
pub fn best_ncut_partition(w: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = w.nrows();
    let mut best = (f64::INFINITY, 0u32);
    // node n-1 always on the complement side, so every split is seen once
    for mask in 1u32..(1 << (n - 1)) {
        let in_s: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let c = ncut(w, &in_s);
        if c < best.0 {
            best = (c, mask);
        }
    }
    let mut parts = vec![Vec::new(), Vec::new()];
    for i in 0..n {
        parts[if best.1 >> i & 1 == 1 { 0 } else { 1 }].push(i);
    }
    parts.sort();
    parts
}

/// Fraction of client pairs on which two partitions agree about being
/// together or apart.
pub fn pairwise_agreement(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut agree, mut total) = (0usize, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total.max(1) as f64
}

/// `2 rounds zeta mu D / rho * sum(B) + K |theta|`, written out term by term.
pub fn eq_cost(zeta: f64, mu: f64, rho: f64, k: f64, lora: f64, batches: &[f64], rounds: f64, d: f64) -> f64 {
    let mut sum_b = 0.0;
    for b in batches {
        sum_b += b;
    }
    (2.0 * rounds * zeta * mu * d / rho) * sum_b + k * lora
}

/// `2 rounds B mu zeta D / (rho bandwidth)`.
pub fn eq_time(zeta: f64, mu: f64, rho: f64, bw: f64, rounds: f64, b: f64, d: f64) -> f64 {
    2.0 * rounds * b * mu * zeta * d / (rho * bw)
}

/// Majority-marker rule for the synthetic corpus layout.
pub fn majority_marker(tokens: &[u32], n_classes: usize, markers_per_class: usize) -> Option<usize> {
    let mut counts = vec![0usize; n_classes];
    for &t in tokens {
        let t = t as usize;
        if t >= 1 && t <= n_classes * markers_per_class {
            counts[(t - 1) / markers_per_class] += 1;
        }
    }
    let max = *counts.iter().max()?;
    let winners: Vec<usize> = (0..n_classes).filter(|&c| counts[c] == max).collect();
    (max > 0 && winners.len() == 1).then(|| winners[0])
}
