//! Synthetic classification corpus, non-IID partitioning and label-flip
//! poisoning.
//!
//! Token layout: id 0 is padding, ids `1 ..= C*m` are class markers (`m`
//! consecutive ids per class), everything above is noise. A sample's label
//! is the class with the most markers in it.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{ElsaError, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<u32>,
    /// Training label (possibly flipped).
    pub label: usize,
    /// Label assigned by the generator.
    pub clean_label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for s in &self.samples {
            h[s.label] += 1;
        }
        h
    }

    /// Shannon entropy (nats) of the label distribution.
    pub fn label_entropy(&self) -> f64 {
        let n = self.len() as f64;
        self.label_histogram()
            .into_iter()
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    pub fn concat(parts: &[Dataset]) -> Dataset {
        Dataset {
            samples: parts.iter().flat_map(|d| d.samples.iter().cloned()).collect(),
            n_classes: parts.first().map_or(0, |d| d.n_classes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub markers_per_class: usize,
    /// Probability that a sample also carries a minority of another class's markers.
    pub distractor_prob: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            seq_len: 8,
            n_classes: 4,
            markers_per_class: 2,
            distractor_prob: 0.3,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes * 4 > self.vocab_size {
            return Err(ElsaError::Config(format!(
                "corpus needs 2 <= n_classes <= vocab_size / 4 (n_classes = {}, vocab_size = {})",
                self.n_classes, self.vocab_size
            )));
        }
        if self.markers_per_class == 0 || 1 + self.n_classes * self.markers_per_class >= self.vocab_size {
            return Err(ElsaError::Config("corpus markers leave no noise tokens".into()));
        }
        if self.seq_len < 2 {
            return Err(ElsaError::Config("corpus needs seq_len >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(ElsaError::Config("corpus.distractor_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn marker_class(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        if t == 0 || t > self.n_classes * self.markers_per_class {
            None
        } else {
            Some((t - 1) / self.markers_per_class)
        }
    }

    fn marker(&self, class: usize, rng: &mut impl Rng) -> u32 {
        (1 + class * self.markers_per_class + rng.random_range(0..self.markers_per_class)) as u32
    }

    fn noise(&self, rng: &mut impl Rng) -> u32 {
        rng.random_range((1 + self.n_classes * self.markers_per_class) as u32..self.vocab_size as u32)
    }
}

/// Labels are uniform; lengths are uniform in `[seq_len/2, seq_len]`.
pub fn make_synthetic_corpus(seed_value: u64, spec: &CorpusSpec, n_samples: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng_for(&[seed::tag::CORPUS, seed_value]);
    let min_len = (spec.seq_len / 2).max(2);
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let label = rng.random_range(0..spec.n_classes);
        let len = rng.random_range(min_len..=spec.seq_len);
        let n_markers = rng.random_range(2..=(len / 2).max(2));
        let mut tokens: Vec<u32> = (0..n_markers).map(|_| spec.marker(label, &mut rng)).collect();
        if rng.random::<f64>() < spec.distractor_prob {
            let other = (label + rng.random_range(1..spec.n_classes)) % spec.n_classes;
            let n_other = rng.random_range(1..=(n_markers - 1).min(len - n_markers).max(1));
            if n_markers + n_other <= len && n_other < n_markers {
                tokens.extend((0..n_other).map(|_| spec.marker(other, &mut rng)));
            }
        }
        while tokens.len() < len {
            tokens.push(spec.noise(&mut rng));
        }
        tokens.shuffle(&mut rng);
        samples.push(Sample {
            tokens,
            label,
            clean_label: label,
        });
    }
    Ok(Dataset {
        samples,
        n_classes: spec.n_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSpec {
    /// Dirichlet concentration for per-client label proportions.
    pub alpha: f64,
    /// Client sizes within an edge pool proportional to `n + 1`.
    pub quantity_skew: bool,
    pub poisoned: Vec<usize>,
    /// When `poisoned` is empty, this many ids are drawn from the run seed.
    pub n_poisoned: usize,
    pub flip_fraction: f64,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            quantity_skew: true,
            poisoned: Vec::new(),
            n_poisoned: 0,
            flip_fraction: 1.0,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(ElsaError::Config("partition.alpha must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_fraction) {
            return Err(ElsaError::Config("partition.flip_fraction must lie in [0, 1]".into()));
        }
        if !self.poisoned.is_empty() && self.n_poisoned > 0 {
            return Err(ElsaError::Config(
                "set either partition.poisoned or partition.n_poisoned, not both".into(),
            ));
        }
        if self.n_poisoned > n_clients {
            return Err(ElsaError::Config(format!(
                "partition.n_poisoned = {} exceeds topology.n_clients = {n_clients}",
                self.n_poisoned
            )));
        }
        if let Some(p) = self.poisoned.iter().find(|&&p| p >= n_clients) {
            return Err(ElsaError::Config(format!(
                "partition.poisoned lists client {p} but there are only {n_clients} clients"
            )));
        }
        Ok(())
    }
}

impl PartitionSpec {
    /// Replaces `n_poisoned` with a concrete, sorted id list drawn from `seed_value`.
    pub fn resolve(&self, n_clients: usize, seed_value: u64) -> Result<Self> {
        self.validate(n_clients)?;
        let mut out = self.clone();
        if self.n_poisoned > 0 {
            let mut rng = seed::rng_for(&[seed::tag::POISON, seed_value]);
            let mut ids = rand::seq::index::sample(&mut rng, n_clients, self.n_poisoned).into_vec();
            ids.sort_unstable();
            out.poisoned = ids;
            out.n_poisoned = 0;
        }
        Ok(out)
    }
}

/// Splits `total` into integer parts proportional to `weights`, each at
/// least 1, summing exactly to `total` (largest remainder).
pub fn proportional_sizes(total: usize, weights: &[f64]) -> Result<Vec<usize>> {
    let m = weights.len();
    if total < m {
        return Err(ElsaError::Config(format!("{total} samples cannot cover {m} shards")));
    }
    let wsum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / wsum).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = total - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    // tiny weights can round to zero; borrow from the largest share
    while let Some(z) = sizes.iter().position(|&s| s == 0) {
        let big = (0..m).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).expect("m > 0");
        sizes[big] -= 1;
        sizes[z] += 1;
    }
    Ok(sizes)
}

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let s: f64 = draws.iter().sum();
    if s > 0.0 && s.is_finite() {
        draws.iter().map(|d| d / s).collect()
    } else {
        // every draw underflowed: all mass on one class
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Deals the corpus to clients. `homes[n]` is client `n`'s edge; each edge
/// gets a pool proportional to its client count, pools are split by
/// quantity factors `n + 1`, and every client draws its share class by class
/// from a Dirichlet proportion vector (falling back to whatever classes the
/// pool still has). Poisoned clients then get labels flipped.
pub fn partition_data(
    dataset: &Dataset,
    homes: &[usize],
    n_edges: usize,
    spec: &PartitionSpec,
    seed_value: u64,
) -> Result<Vec<Dataset>> {
    let n_clients = homes.len();
    let spec = &spec.resolve(n_clients, seed_value)?;
    if n_clients == 0 || dataset.len() < n_clients {
        return Err(ElsaError::Config(format!(
            "{} samples cannot be dealt to {n_clients} clients",
            dataset.len()
        )));
    }
    if let Some(h) = homes.iter().find(|&&h| h >= n_edges) {
        return Err(ElsaError::Input(format!("home edge {h} out of range")));
    }
    let c = dataset.n_classes;
    let mut rng = seed::rng_for(&[seed::tag::PARTITION, seed_value]);

    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);

    let members: Vec<Vec<usize>> = (0..n_edges)
        .map(|k| (0..n_clients).filter(|&n| homes[n] == k).collect())
        .collect();
    let active: Vec<usize> = (0..n_edges).filter(|&k| !members[k].is_empty()).collect();
    let pool_sizes = proportional_sizes(
        dataset.len(),
        &active.iter().map(|&k| members[k].len() as f64).collect::<Vec<_>>(),
    )?;

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    let mut cursor = 0;
    for (&k, &pool_size) in active.iter().zip(&pool_sizes) {
        let pool = &idx[cursor..cursor + pool_size];
        cursor += pool_size;
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
        for &i in pool {
            by_class[dataset.samples[i].label].push(i);
        }
        let weights: Vec<f64> = members[k]
            .iter()
            .map(|&n| if spec.quantity_skew { (n + 1) as f64 } else { 1.0 })
            .collect();
        let sizes = proportional_sizes(pool_size, &weights)?;
        for (&n, &size) in members[k].iter().zip(&sizes) {
            let p = dirichlet(spec.alpha, c, &mut rng);
            for _ in 0..size {
                let avail: f64 = (0..c).filter(|&j| !by_class[j].is_empty()).map(|j| p[j]).sum();
                let class = if avail > 0.0 {
                    let mut u = rng.random::<f64>() * avail;
                    let mut pick = None;
                    for j in (0..c).filter(|&j| !by_class[j].is_empty()) {
                        pick = Some(j);
                        if u < p[j] {
                            break;
                        }
                        u -= p[j];
                    }
                    pick.expect("a non-empty class exists")
                } else {
                    // preferred classes exhausted: draw proportional to what is left
                    let left: usize = by_class.iter().map(Vec::len).sum();
                    let mut u = rng.random_range(0..left);
                    let mut pick = 0;
                    for (j, v) in by_class.iter().enumerate() {
                        if u < v.len() {
                            pick = j;
                            break;
                        }
                        u -= v.len();
                    }
                    pick
                };
                shards[n].push(by_class[class].pop().expect("class is non-empty"));
            }
        }
    }

    let mut out: Vec<Dataset> = shards
        .into_iter()
        .map(|s| Dataset {
            samples: s.into_iter().map(|i| dataset.samples[i].clone()).collect(),
            n_classes: c,
        })
        .collect();
    poison(&mut out, spec, seed_value)?;
    Ok(out)
}

/// Reassigns `flip_fraction` of each poisoned client's labels uniformly to a
/// wrong class.
pub fn poison(shards: &mut [Dataset], spec: &PartitionSpec, seed_value: u64) -> Result<()> {
    let spec = &spec.resolve(shards.len(), seed_value)?;
    for &n in &spec.poisoned {
        let mut rng = seed::rng_for(&[seed::tag::POISON, seed_value, n as u64]);
        let shard = &mut shards[n];
        let c = shard.n_classes;
        let count = (spec.flip_fraction * shard.len() as f64).round() as usize;
        let mut which: Vec<usize> = (0..shard.len()).collect();
        which.shuffle(&mut rng);
        for &i in &which[..count] {
            let s = &mut shard.samples[i];
            s.label = (s.clean_label + rng.random_range(1..c)) % c;
        }
    }
    Ok(())
}

/// Client `n` lives on edge `n % K`.
pub fn round_robin_homes(n_clients: usize, n_edges: usize) -> Vec<usize> {
    (0..n_clients).map(|n| n % n_edges.max(1)).collect()
}
