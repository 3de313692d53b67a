//! Everything that happens before the first global round: data, topology,
//! fingerprints, clustering and per-client links.

use std::sync::Arc;

use rand::seq::index::sample;

use crate::clustering::{assign_clients, ClusterAssignment, Topology};
use crate::codec::PerturbationBasis;
use crate::config::ExperimentConfig;
use crate::error::{ElsaError, Result};
use crate::fingerprint::{
    build_probe_set, divergence_matrix, extract_fingerprint, trust_scores, trust_terms, DivergenceMatrix, Fingerprint,
    ProbeSet, TrustTerms,
};
use crate::metrics::{make_synthetic_corpus, partition_data, Dataset};
use crate::model::{SplitModel, TrainableParams};
use crate::par::par_map;
use crate::protocol::link::ClientLink;
use crate::seed::{self, tag};

#[derive(Debug, Clone)]
pub struct Simulation {
    pub cfg: ExperimentConfig,
    pub model: SplitModel,
    /// Shared initial adapters and head.
    pub theta0: TrainableParams,
    pub topology: Topology,
    pub homes: Vec<usize>,
    pub shards: Vec<Dataset>,
    pub test: Dataset,
}

#[derive(Debug, Clone)]
pub struct FingerprintStage {
    pub probe: ProbeSet,
    pub fingerprints: Vec<Fingerprint>,
    pub divergence: DivergenceMatrix,
    pub terms: TrustTerms,
    pub trust: Vec<f64>,
}

/// Mini-batch indices for client `n` at a given step.
pub fn batch_indices(run_seed: u64, client: usize, step: &[u64], len: usize, batch: usize) -> Vec<usize> {
    let mut parts = vec![tag::BATCH, run_seed, client as u64];
    parts.extend_from_slice(step);
    let mut rng = seed::rng_for(&parts);
    let mut idx = sample(&mut rng, len, batch.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

impl Simulation {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.seed;
        let mut cfg = cfg.clone();
        cfg.partition = cfg.partition.resolve(cfg.topology.n_clients, s)?;
        let cfg = &cfg;
        let model = SplitModel::new(cfg.model.clone(), s)?;
        let theta0 = model.init_params(s);
        let t = &cfg.topology;
        let topology = if t.latency.is_empty() {
            Topology::generate(t.n_clients, t.n_edges, t.tau_max, t.bandwidth, &t.unreachable, s)?
        } else {
            let flat: Vec<f64> = t.latency.iter().flatten().copied().collect();
            Topology::new(
                nalgebra::DMatrix::from_row_slice(t.n_clients, t.n_edges, &flat),
                t.tau_max,
                t.bandwidth,
            )?
        };
        let homes = topology.home_edges();
        let spec = cfg.corpus_spec();
        let train = make_synthetic_corpus(seed::derive(&[s, 1]), &spec, cfg.data.train_samples)?;
        let test = make_synthetic_corpus(seed::derive(&[s, 2]), &spec, cfg.data.test_samples)?;
        let shards = partition_data(&train, &homes, t.n_edges, &cfg.partition, s)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            theta0,
            topology,
            homes,
            shards,
            test,
        })
    }

    pub fn n_clients(&self) -> usize {
        self.shards.len()
    }

    pub fn pooled(&self) -> Dataset {
        Dataset::concat(&self.shards)
    }

    pub fn batch<'a>(&'a self, client: usize, step: &[u64]) -> Vec<(&'a [u32], usize)> {
        let shard = &self.shards[client];
        batch_indices(self.cfg.seed, client, step, shard.len(), self.cfg.training.batch_size)
            .into_iter()
            .map(|i| (shard.samples[i].tokens.as_slice(), shard.samples[i].label))
            .collect()
    }

    /// Local fine-tuning from the shared initialization, used only to
    /// expose each client's data to the fingerprint.
    pub fn warmup(&self, client: usize) -> Result<TrainableParams> {
        let mut p = self.theta0.clone();
        for step in 0..self.cfg.fingerprint.warmup_steps {
            let batch = self.batch(client, &[tag::WARMUP, step as u64]);
            let (_, g) = self.model.batch_loss_and_grad(&p, &batch)?;
            p.axpy(-self.cfg.training.lr, &g);
        }
        if !p.is_finite() {
            return Err(ElsaError::Numeric(format!("warm-up diverged on client {client}")));
        }
        Ok(p)
    }

    pub fn fingerprints(&self) -> Result<FingerprintStage> {
        let m = &self.cfg.model;
        let probe = build_probe_set(self.cfg.seed, self.cfg.fingerprint.probes, m.seq_len, m.vocab_size)?;
        let ids: Vec<usize> = (0..self.n_clients()).collect();
        let fingerprints = par_map(&ids, |&n| {
            let p = self.warmup(n)?;
            extract_fingerprint(&self.model, &p, &probe, self.cfg.fingerprint.ridge)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let divergence = divergence_matrix(&fingerprints)?;
        let terms = trust_terms(&fingerprints, &divergence)?;
        let trust = trust_scores(&fingerprints, &divergence, self.cfg.fingerprint.normalize)?;
        Ok(FingerprintStage {
            probe,
            fingerprints,
            divergence,
            terms,
            trust,
        })
    }

    pub fn cluster(&self, fp: &FingerprintStage) -> Result<ClusterAssignment> {
        assign_clients(
            &self.topology,
            &fp.fingerprints,
            &fp.trust,
            &fp.divergence,
            &self.cfg.clustering,
            self.cfg.seed,
        )
    }

    /// Boundary links for every client; perturbation bases are fitted on the
    /// client's probe embeddings.
    pub fn links(&self, fp: &FingerprintStage) -> Result<Vec<ClientLink>> {
        let c = &self.cfg.codec;
        let mode = c.channel_mode()?;
        let dim = self.cfg.model.hidden_dim;
        (0..self.n_clients())
            .map(|n| {
                let basis = if mode == crate::codec::ChannelMode::SsopSketch {
                    Some(Arc::new(PerturbationBasis::fit(
                        &fp.fingerprints[n].embeddings,
                        c.rank,
                        c.salt.as_bytes(),
                        n as u64,
                    )?))
                } else {
                    None
                };
                Ok(ClientLink {
                    client: n,
                    mode,
                    basis,
                    rows: c.rows,
                    buckets: c.buckets(dim),
                    dim,
                    salt: c.salt.as_bytes().to_vec(),
                    compress_gradients: c.compress_gradients,
                    edge_unrotate: c.edge_unrotate,
                    zeta: c.zeta,
                    run_seed: self.cfg.seed,
                })
            })
            .collect()
    }
}
