//! Latency-feasible candidate sets, trust-weighted spectral clustering per
//! edge server, low-trust merging, and the final client -> edge mapping.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};
use crate::fingerprint::{sym_kl_gaussian, DivergenceMatrix, Fingerprint, Gaussian};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// `latency[(n, k)]` in milliseconds.
    pub latency: DMatrix<f64>,
    pub tau_max: f64,
    /// Effective bandwidth, bytes per second.
    pub bandwidth: f64,
}

impl Topology {
    pub fn new(latency: DMatrix<f64>, tau_max: f64, bandwidth: f64) -> Result<Self> {
        let t = Self {
            latency,
            tau_max,
            bandwidth,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latency.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ElsaError::Config("topology.latency must be finite and >= 0".into()));
        }
        if !(self.tau_max > 0.0) {
            return Err(ElsaError::Config("topology.tau_max must be > 0".into()));
        }
        if !(self.bandwidth > 0.0) {
            return Err(ElsaError::Config("topology.bandwidth must be > 0".into()));
        }
        Ok(())
    }

    /// Synthetic layout: client `n` lives near edge `n % K` (20-120 ms) and
    /// sees every other edge at 130-400 ms. Clients in `unreachable` see all
    /// edges beyond `tau_max`.
    pub fn generate(
        n_clients: usize,
        n_edges: usize,
        tau_max: f64,
        bandwidth: f64,
        unreachable: &[usize],
        seed_value: u64,
    ) -> Result<Self> {
        if n_edges == 0 {
            return Err(ElsaError::Config("topology needs at least one edge".into()));
        }
        let mut rng = seed::rng_for(&[seed::tag::TOPOLOGY, seed_value]);
        let mut latency = DMatrix::zeros(n_clients, n_edges);
        for n in 0..n_clients {
            for k in 0..n_edges {
                latency[(n, k)] = if k == n % n_edges {
                    rng.random_range(20.0..120.0)
                } else {
                    rng.random_range(130.0..400.0)
                };
            }
            if unreachable.contains(&n) {
                for k in 0..n_edges {
                    latency[(n, k)] = tau_max + rng.random_range(50.0..300.0);
                }
            }
        }
        Self::new(latency, tau_max, bandwidth)
    }

    pub fn n_clients(&self) -> usize {
        self.latency.nrows()
    }

    pub fn n_edges(&self) -> usize {
        self.latency.ncols()
    }

    /// Lowest-latency edge for each client (ties to the lowest id).
    pub fn home_edges(&self) -> Vec<usize> {
        (0..self.n_clients())
            .map(|n| {
                let mut best = 0;
                for k in 1..self.n_edges() {
                    if self.latency[(n, k)] < self.latency[(n, best)] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

pub fn feasible_servers(topology: &Topology, n: usize) -> Vec<usize> {
    (0..topology.n_edges())
        .filter(|&k| topology.latency[(n, k)] <= topology.tau_max)
        .collect()
}

/// Candidate clients of edge `k`.
pub fn candidates(topology: &Topology, k: usize) -> Vec<usize> {
    (0..topology.n_clients())
        .filter(|&n| topology.latency[(n, k)] <= topology.tau_max)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinityMatrix {
    /// Client id of each row/column.
    pub ids: Vec<usize>,
    pub values: DMatrix<f64>,
    pub gamma: f64,
}

/// `A[n, n'] = w_n * w_n' * exp(-gamma * R(n, n'))` over the candidate ids.
/// `trust` and `r` are indexed by global client id.
pub fn affinity(ids: &[usize], trust: &[f64], r: &DivergenceMatrix, gamma: f64) -> Result<AffinityMatrix> {
    if !(gamma > 0.0) {
        return Err(ElsaError::Config(format!("clustering.gamma must be > 0 (got {gamma})")));
    }
    if let Some(bad) = ids.iter().find(|&&n| n >= trust.len() || n >= r.len()) {
        return Err(ElsaError::Input(format!("client {bad} has no trust score or divergence row")));
    }
    let m = ids.len();
    let values = DMatrix::from_fn(m, m, |i, j| {
        let (a, b) = (ids[i], ids[j]);
        trust[a] * trust[b] * (-gamma * r.get(a, b)).exp()
    });
    Ok(AffinityMatrix {
        ids: ids.to_vec(),
        values,
        gamma,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralOptions {
    /// Fixed cluster count; `None` picks it with the eigengap heuristic.
    pub n_clusters: Option<usize>,
    /// Upper limit for the eigengap heuristic.
    pub max_clusters: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            n_clusters: None,
            max_clusters: 4,
            kmeans_restarts: 8,
            seed: 0,
        }
    }
}

/// Normalized-Laplacian spectral clustering (row-normalized eigenvector
/// embedding followed by seeded k-means). Clusters come back as sorted id
/// lists ordered by their smallest id.
pub fn spectral_cluster(a: &AffinityMatrix, opts: &SpectralOptions) -> Result<Vec<Vec<usize>>> {
    let m = a.ids.len();
    if a.values.shape() != (m, m) {
        return Err(ElsaError::Input("affinity shape does not match its id list".into()));
    }
    if m < 2 {
        return Ok(a.ids.iter().map(|&n| vec![n]).collect());
    }
    if a.values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ElsaError::Input("affinity must be finite and non-negative".into()));
    }

    // Work in sorted-id order so the result is equivariant under relabeling.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by_key(|&i| a.ids[i]);
    let ids: Vec<usize> = order.iter().map(|&i| a.ids[i]).collect();
    let w = DMatrix::from_fn(m, m, |i, j| a.values[(order[i], order[j])]);

    let deg: Vec<f64> = (0..m).map(|i| w.row(i).sum()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut lap = DMatrix::from_fn(m, m, |i, j| -inv_sqrt[i] * w[(i, j)] * inv_sqrt[j]);
    for i in 0..m {
        lap[(i, i)] += 1.0;
    }
    lap = (&lap + lap.transpose()) * 0.5;

    let eig = lap.symmetric_eigen();
    let mut idx: Vec<usize> = (0..m).collect();
    idx.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));
    let lambda: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();

    let k = match opts.n_clusters {
        Some(k) if k == 0 => return Err(ElsaError::Config("clustering.n_clusters must be >= 1".into())),
        Some(k) => k.min(m),
        None => eigengap_count(&lambda, opts.max_clusters.max(1)),
    };
    if k == 1 {
        return Ok(vec![ids]);
    }

    let mut emb = DMatrix::from_fn(m, k, |i, c| eig.eigenvectors[(i, idx[c])]);
    for mut row in emb.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    let kseed = seed::derive(
        &[seed::tag::KMEANS, opts.seed]
            .into_iter()
            .chain(ids.iter().map(|&n| n as u64))
            .collect::<Vec<_>>(),
    );
    let labels = kmeans(&emb, k, opts.kmeans_restarts.max(1), kseed);

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(ids[i]);
    }
    groups.retain(|g| !g.is_empty());
    groups.sort_by_key(|g| g[0]);
    Ok(groups)
}

/// Number of leading eigenvalues before the largest gap, in `1..=cap`.
pub fn eigengap_count(sorted_eigenvalues: &[f64], cap: usize) -> usize {
    let m = sorted_eigenvalues.len();
    let top = cap.min(m.saturating_sub(1));
    let mut best = (1, f64::NEG_INFINITY);
    for k in 1..=top {
        let gap = sorted_eigenvalues[k] - sorted_eigenvalues[k - 1];
        if gap > best.1 + 1e-12 {
            best = (k, gap);
        }
    }
    best.0
}

fn sq_dist(x: &DMatrix<f64>, i: usize, c: &DMatrix<f64>, j: usize) -> f64 {
    (0..x.ncols()).map(|d| (x[(i, d)] - c[(j, d)]).powi(2)).sum()
}

fn plus_plus_init(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = x.nrows();
    let mut c = DMatrix::zeros(k, x.ncols());
    let first = rng.random_range(0..m);
    c.row_mut(0).copy_from(&x.row(first));
    let mut dist: Vec<f64> = (0..m).map(|i| sq_dist(x, i, &c, 0)).collect();
    for j in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..m)
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, d) in dist.iter().enumerate() {
                if u < *d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        };
        c.row_mut(j).copy_from(&x.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(x, i, &c, j));
        }
    }
    c
}

/// Seeded k-means++ with Lloyd iterations; the restart with the lowest
/// inertia wins (first one on ties).
pub fn kmeans(x: &DMatrix<f64>, k: usize, restarts: usize, seed_value: u64) -> Vec<usize> {
    let m = x.nrows();
    let mut rng = seed::rng(seed_value);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let mut c = plus_plus_init(x, k, &mut rng);
        let mut labels = vec![usize::MAX; m];
        for _ in 0..100 {
            let mut changed = false;
            for i in 0..m {
                let mut bl = 0;
                let mut bd = f64::INFINITY;
                for j in 0..k {
                    let d = sq_dist(x, i, &c, j);
                    if d < bd {
                        bd = d;
                        bl = j;
                    }
                }
                if labels[i] != bl {
                    labels[i] = bl;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            for j in 0..k {
                let members: Vec<usize> = (0..m).filter(|&i| labels[i] == j).collect();
                if members.is_empty() {
                    continue;
                }
                let mut row = DVector::zeros(x.ncols());
                for &i in &members {
                    row += x.row(i).transpose();
                }
                row /= members.len() as f64;
                c.row_mut(j).copy_from(&row.transpose());
            }
        }
        let inertia: f64 = (0..m).map(|i| sq_dist(x, i, &c, labels[i])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b - 1e-12) {
            best = Some((inertia, labels));
        }
    }
    best.map(|b| b.1).unwrap_or_default()
}

/// Pooled cluster centroid: mean of member means, mean of member
/// (regularized) covariances.
pub fn pooled_centroid(members: &[usize], fps: &[Fingerprint]) -> Gaussian {
    let d = fps[members[0]].dim();
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    for &n in members {
        mean += &fps[n].mean;
        cov += fps[n].regularized_cov();
    }
    let c = members.len() as f64;
    Gaussian {
        mean: mean / c,
        cov: cov / c,
    }
}

pub fn mean_trust(members: &[usize], trust: &[f64]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    members.iter().map(|&n| trust[n]).sum::<f64>() / members.len() as f64
}

/// Average symmetric KL over ordered member pairs; 0 for fewer than two.
pub fn coherence(members: &[usize], r: &DivergenceMatrix) -> f64 {
    let c = members.len();
    if c < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for &a in members {
        for &b in members {
            if a != b {
                acc += r.get(a, b);
            }
        }
    }
    acc / (c * (c - 1)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeOutcome {
    pub clusters: Vec<Vec<usize>>,
    pub excluded: Vec<usize>,
}

/// Clusters whose mean trust is below `w_min` are folded into the
/// high-trust cluster with the nearest pooled centroid. With no high-trust
/// cluster available their members are excluded instead.
pub fn merge_low_trust(
    clusters: &[Vec<usize>],
    trust: &[f64],
    fps: &[Fingerprint],
    w_min: f64,
) -> Result<MergeOutcome> {
    let (high, low): (Vec<&Vec<usize>>, Vec<&Vec<usize>>) = clusters
        .iter()
        .filter(|c| !c.is_empty())
        .partition(|c| mean_trust(c, trust) >= w_min);
    if high.is_empty() {
        let mut excluded: Vec<usize> = low.iter().flat_map(|c| c.iter().copied()).collect();
        excluded.sort_unstable();
        return Ok(MergeOutcome {
            clusters: Vec::new(),
            excluded,
        });
    }
    let centroids: Vec<Gaussian> = high.iter().map(|c| pooled_centroid(c, fps)).collect();
    let mut merged: Vec<Vec<usize>> = high.iter().map(|c| (*c).clone()).collect();
    for c in low {
        let g = pooled_centroid(c, fps);
        let mut target = 0;
        let mut best = f64::INFINITY;
        for (j, h) in centroids.iter().enumerate() {
            let d = sym_kl_gaussian(&g, h)?;
            if d < best {
                best = d;
                target = j;
            }
        }
        merged[target].extend(c.iter().copied());
    }
    for m in &mut merged {
        m.sort_unstable();
    }
    merged.sort_by_key(|g| g[0]);
    Ok(MergeOutcome {
        clusters: merged,
        excluded: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringParams {
    pub gamma: f64,
    /// Divide `gamma` by the lower quartile of the pairwise divergences, so
    /// the kernel adapts to the fingerprint scale. The median would land on a
    /// between-group pair as soon as two groups are of similar size, which
    /// leaves those pairs at affinity 1/e and hides the eigengap.
    pub scale_gamma: bool,
    pub w_min: f64,
    pub n_clusters: Option<usize>,
    pub max_clusters: usize,
}

impl Default for ClusteringParams {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            scale_gamma: true,
            w_min: 0.1,
            n_clusters: None,
            max_clusters: 4,
        }
    }
}

/// Linear-interpolated quantile of sorted data; 0 for an empty slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        m => {
            let pos = q * (m - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(m - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

impl ClusteringParams {
    /// The kernel width actually used for divergence matrix `r`.
    pub fn effective_gamma(&self, r: &DivergenceMatrix) -> f64 {
        if !self.scale_gamma {
            return self.gamma;
        }
        let mut off: Vec<f64> = Vec::new();
        for i in 0..r.len() {
            for j in i + 1..r.len() {
                off.push(r.get(i, j));
            }
        }
        off.sort_by(f64::total_cmp);
        let scale = quantile(&off, 0.25);
        if scale > 0.0 {
            self.gamma / scale
        } else {
            self.gamma
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(ElsaError::Config("clustering.gamma must be > 0".into()));
        }
        if !self.w_min.is_finite() || self.w_min < 0.0 {
            return Err(ElsaError::Config("clustering.w_min must be >= 0".into()));
        }
        if self.max_clusters == 0 || self.n_clusters == Some(0) {
            return Err(ElsaError::Config("clustering cluster counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exclusion {
    OutOfRange,
    LowTrust,
}

impl Exclusion {
    pub fn label(self) -> &'static str {
        match self {
            Exclusion::OutOfRange => "out-of-range",
            Exclusion::LowTrust => "low-trust",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCluster {
    pub edge: usize,
    /// Final members after cross-edge deduplication, sorted.
    pub members: Vec<usize>,
    /// Spectral clusters after merging, restricted to the final members.
    pub groups: Vec<Vec<usize>>,
    pub mean_trust: f64,
    pub coherence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// One entry per edge server, possibly with no members.
    pub edges: Vec<EdgeCluster>,
    pub excluded: Vec<(usize, Exclusion)>,
    pub edge_of: Vec<Option<usize>>,
    pub trust: Vec<f64>,
}

impl ClusterAssignment {
    pub fn assigned(&self) -> impl Iterator<Item = usize> + '_ {
        self.edge_of
            .iter()
            .enumerate()
            .filter_map(|(n, e)| e.map(|_| n))
    }

    pub fn n_assigned(&self) -> usize {
        self.assigned().count()
    }

    pub fn exclusion(&self, n: usize) -> Option<Exclusion> {
        self.excluded.iter().find(|(m, _)| *m == n).map(|(_, e)| *e)
    }
}

/// Per-edge clustering followed by the serial cross-edge deduplication.
pub fn assign_clients(
    topology: &Topology,
    fps: &[Fingerprint],
    trust: &[f64],
    r: &DivergenceMatrix,
    params: &ClusteringParams,
    seed_value: u64,
) -> Result<ClusterAssignment> {
    params.validate()?;
    let n = topology.n_clients();
    if fps.len() != n || trust.len() != n || r.len() != n {
        return Err(ElsaError::Input(format!(
            "topology has {n} clients but got {} fingerprints, {} trust scores, {} divergence rows",
            fps.len(),
            trust.len(),
            r.len()
        )));
    }

    let gamma = params.effective_gamma(r);
    let mut surviving: Vec<Vec<Vec<usize>>> = Vec::with_capacity(topology.n_edges());
    for k in 0..topology.n_edges() {
        let cand = candidates(topology, k);
        if cand.is_empty() {
            surviving.push(Vec::new());
            continue;
        }
        let a = affinity(&cand, trust, r, gamma)?;
        let opts = SpectralOptions {
            n_clusters: params.n_clusters,
            max_clusters: params.max_clusters,
            kmeans_restarts: 8,
            seed: seed::derive(&[seed_value, k as u64]),
        };
        let groups = spectral_cluster(&a, &opts)?;
        surviving.push(merge_low_trust(&groups, trust, fps, params.w_min)?.clusters);
    }

    let mut edge_of = vec![None; n];
    let mut excluded = Vec::new();
    for (c, slot) in edge_of.iter_mut().enumerate() {
        let feasible = feasible_servers(topology, c);
        if feasible.is_empty() {
            excluded.push((c, Exclusion::OutOfRange));
            continue;
        }
        let mut best: Option<usize> = None;
        for &k in &feasible {
            if surviving[k].iter().any(|g| g.contains(&c))
                && best.is_none_or(|b| topology.latency[(c, k)] < topology.latency[(c, b)])
            {
                best = Some(k);
            }
        }
        match best {
            Some(k) => *slot = Some(k),
            None => excluded.push((c, Exclusion::LowTrust)),
        }
    }
    if edge_of.iter().all(Option::is_none) {
        return Err(ElsaError::Config(
            "clustering left no clients: check topology.tau_max and clustering.w_min".into(),
        ));
    }

    let edges = (0..topology.n_edges())
        .map(|k| {
            let members: Vec<usize> = (0..n).filter(|&c| edge_of[c] == Some(k)).collect();
            let keep: BTreeSet<usize> = members.iter().copied().collect();
            let groups = surviving[k]
                .iter()
                .map(|g| g.iter().copied().filter(|c| keep.contains(c)).collect::<Vec<_>>())
                .filter(|g| !g.is_empty())
                .collect();
            EdgeCluster {
                edge: k,
                mean_trust: mean_trust(&members, trust),
                coherence: coherence(&members, r),
                members,
                groups,
            }
        })
        .collect();
    Ok(ClusterAssignment {
        edges,
        excluded,
        edge_of,
        trust: trust.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fingerprint::RidgePolicy;

    fn toy_fps(n: usize) -> Vec<Fingerprint> {
        (0..n)
            .map(|i| {
                let t = DMatrix::from_fn(6, 2, |r, c| 1.0 + i as f64 + 0.1 * (r * (c + 1)) as f64);
                Fingerprint::from_embeddings(t, RidgePolicy::default()).unwrap()
            })
            .collect()
    }

    fn zero_r(n: usize) -> DivergenceMatrix {
        DivergenceMatrix {
            values: DMatrix::zeros(n, n),
        }
    }

    #[test]
    fn feasibility_threshold() {
        let t = Topology::new(DMatrix::from_row_slice(3, 2, &[100.0, 300.0, 250.0, 201.0, 200.0, 50.0]), 200.0, 1e6)
            .unwrap();
        assert_eq!(feasible_servers(&t, 0), vec![0]);
        assert!(feasible_servers(&t, 1).is_empty());
        assert_eq!(feasible_servers(&t, 2), vec![0, 1]);
        assert!(Topology::new(DMatrix::from_element(1, 1, -1.0), 200.0, 1.0).is_err());
    }

    #[test]
    fn affinity_examples() {
        let r = zero_r(3);
        let a = affinity(&[0, 1, 2], &[1.0; 3], &r, 1.0).unwrap();
        assert!(a.values.iter().all(|v| *v == 1.0));

        let mut r = zero_r(4);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    r.values[(i, j)] = if i / 2 == j / 2 { 0.1 } else { 10.0 };
                }
            }
        }
        let w = [0.9, 0.8, 0.7, 0.6];
        let a1 = affinity(&[0, 1, 2, 3], &w, &r, 1.0).unwrap();
        assert!(a1.values[(0, 1)] / (w[0] * w[1]) / (a1.values[(0, 2)] / (w[0] * w[2])) > 9f64.exp());
        let a2 = affinity(&[0, 1, 2, 3], &w, &r, 2.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let ww = w[i] * w[j];
                assert!((a2.values[(i, j)] - ww * (a1.values[(i, j)] / ww).powi(2)).abs() < 1e-15);
            }
        }
        assert!(affinity(&[0], &w, &r, 0.0).is_err());
    }

    #[test]
    fn eigengap_examples() {
        assert_eq!(eigengap_count(&[0.0, 0.0, 1.0, 1.0], 4), 2);
        assert_eq!(eigengap_count(&[0.0, 1.0, 1.0, 1.0], 4), 1);
        assert_eq!(eigengap_count(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 4), 4);
        assert_eq!(eigengap_count(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0], 2), 1);
    }

    #[test]
    fn all_equal_single_cluster_and_singletons() {
        let a = AffinityMatrix {
            ids: vec![3, 1, 2],
            values: DMatrix::from_element(3, 3, 0.5),
            gamma: 1.0,
        };
        let one = SpectralOptions {
            n_clusters: Some(1),
            ..Default::default()
        };
        assert_eq!(spectral_cluster(&a, &one).unwrap(), vec![vec![1, 2, 3]]);
        assert_eq!(spectral_cluster(&a, &SpectralOptions::default()).unwrap(), vec![vec![1, 2, 3]]);
        let single = AffinityMatrix {
            ids: vec![7],
            values: DMatrix::from_element(1, 1, 1.0),
            gamma: 1.0,
        };
        assert_eq!(spectral_cluster(&single, &one).unwrap(), vec![vec![7]]);
    }

    #[test]
    fn merge_examples() {
        let fps = toy_fps(4);
        let trust = [0.9, 0.9, 0.05, 0.05];
        let clusters = vec![vec![0, 1], vec![2, 3]];
        let same = merge_low_trust(&clusters, &trust, &fps, 0.0).unwrap();
        assert_eq!(same.clusters, clusters);
        let merged = merge_low_trust(&clusters, &trust, &fps, 0.5).unwrap();
        assert_eq!(merged.clusters, vec![vec![0, 1, 2, 3]]);
        assert!((mean_trust(&merged.clusters[0], &trust) - 0.475).abs() < 1e-12);
        let gone = merge_low_trust(&[vec![2, 3]], &trust, &fps, 0.5).unwrap();
        assert!(gone.clusters.is_empty());
        assert_eq!(gone.excluded, vec![2, 3]);
    }

    #[test]
    fn merge_picks_nearest_centroid() {
        let fps = toy_fps(5);
        // clusters {0} and {4} are high trust; {1} sits next to {0}
        let trust = [0.9, 0.01, 0.5, 0.5, 0.9];
        let out = merge_low_trust(&[vec![0], vec![1], vec![4]], &trust, &fps, 0.3).unwrap();
        assert_eq!(out.clusters, vec![vec![0, 1], vec![4]]);
    }

    #[test]
    fn coherence_counts_ordered_pairs() {
        let mut r = zero_r(3);
        for (i, j, v) in [(0, 1, 1.0), (0, 2, 2.0), (1, 2, 3.0)] {
            r.values[(i, j)] = v;
            r.values[(j, i)] = v;
        }
        assert!((coherence(&[0, 1, 2], &r) - 12.0 / 6.0).abs() < 1e-15);
        assert_eq!(coherence(&[1], &r), 0.0);
    }

    #[test]
    fn disjoint_coverage_and_min_latency_rule() {
        let lat = DMatrix::from_row_slice(4, 2, &[10.0, 500.0, 20.0, 500.0, 500.0, 10.0, 500.0, 20.0]);
        let t = Topology::new(lat, 200.0, 1e6).unwrap();
        let fps = toy_fps(4);
        let out = assign_clients(&t, &fps, &[0.5; 4], &zero_r(4), &ClusteringParams::default(), 1).unwrap();
        assert_eq!(out.edges[0].members, vec![0, 1]);
        assert_eq!(out.edges[1].members, vec![2, 3]);
        assert!(out.excluded.is_empty());

        let lat = DMatrix::from_row_slice(2, 2, &[50.0, 40.0, 10.0, 10.0]);
        let t = Topology::new(lat, 200.0, 1e6).unwrap();
        let out = assign_clients(&t, &toy_fps(2), &[0.5; 2], &zero_r(2), &ClusteringParams::default(), 1).unwrap();
        assert_eq!(out.edge_of, vec![Some(1), Some(0)]);
    }

    #[test]
    fn exclusion_reasons_and_empty_result() {
        let lat = DMatrix::from_row_slice(3, 1, &[10.0, 10.0, 900.0]);
        let t = Topology::new(lat, 200.0, 1e6).unwrap();
        let fps = toy_fps(3);
        let out = assign_clients(&t, &fps, &[0.5; 3], &zero_r(3), &ClusteringParams::default(), 1).unwrap();
        assert_eq!(out.exclusion(2), Some(Exclusion::OutOfRange));
        assert_eq!(out.n_assigned(), 2);

        let strict = ClusteringParams {
            w_min: 0.9,
            ..Default::default()
        };
        let err = assign_clients(&t, &fps, &[0.5; 3], &zero_r(3), &strict, 1).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn generated_topology_homes() {
        let t = Topology::generate(20, 4, 200.0, 1e6, &[7], 3).unwrap();
        let homes = t.home_edges();
        for n in 0..20 {
            if n != 7 {
                assert_eq!(homes[n], n % 4);
            }
        }
        assert!(feasible_servers(&t, 7).is_empty());
        assert_eq!(t, Topology::generate(20, 4, 200.0, 1e6, &[7], 3).unwrap());
    }
}
