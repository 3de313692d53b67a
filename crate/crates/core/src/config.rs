//! Experiment configuration. Every tunable lives here under a named TOML
//! section; unknown keys are rejected and every key has a default.

use serde::{Deserialize, Serialize};

use crate::clustering::ClusteringParams;
use crate::codec::{buckets_for_ratio, compression_ratio, ChannelMode};
use crate::error::{ElsaError, Result};
use crate::fingerprint::RidgePolicy;
use crate::metrics::{CorpusSpec, PartitionSpec};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_samples: usize,
    pub test_samples: usize,
    pub markers_per_class: usize,
    pub distractor_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 2000,
            test_samples: 400,
            markers_per_class: 2,
            distractor_prob: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub n_clients: usize,
    pub n_edges: usize,
    /// Milliseconds.
    pub tau_max: f64,
    /// Bytes per second.
    pub bandwidth: f64,
    /// Explicit `n_clients x n_edges` latency table in ms; generated when empty.
    pub latency: Vec<Vec<f64>>,
    /// Clients placed beyond `tau_max` of every edge by the generator.
    pub unreachable: Vec<usize>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            n_clients: 20,
            n_edges: 4,
            tau_max: 200.0,
            bandwidth: 1.25e6,
            latency: Vec::new(),
            unreachable: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub mode: String,
    /// Sketch rows `Y`.
    pub rows: usize,
    /// Target compression ratio; the bucket count is `ceil(D / (Y * rho))`.
    pub rho: f64,
    /// Perturbation subspace rank.
    pub rank: usize,
    pub salt: String,
    pub compress_gradients: bool,
    /// Bytes per transmitted value (4 or 8).
    pub zeta: usize,
    /// Ablation only: the edge undoes the client's rotation before its blocks.
    pub edge_unrotate: bool,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: "ssop+sketch".into(),
            rows: 2,
            rho: 2.0,
            rank: 8,
            salt: "elsa-salt".into(),
            compress_gradients: true,
            zeta: 4,
            edge_unrotate: false,
        }
    }
}

impl CodecConfig {
    pub fn channel_mode(&self) -> Result<ChannelMode> {
        ChannelMode::parse(&self.mode)
    }

    pub fn buckets(&self, dim: usize) -> usize {
        buckets_for_ratio(dim, self.rows, self.rho)
    }

    /// The ratio actually achieved on the wire for this mode.
    pub fn effective_rho(&self, dim: usize) -> Result<f64> {
        Ok(if self.channel_mode()?.sketches() {
            compression_ratio(dim, self.rows, self.buckets(dim))
        } else {
            1.0
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FingerprintConfig {
    pub probes: usize,
    /// Divide both trust terms by their cross-client mean.
    pub normalize: bool,
    /// Local SGD steps from the shared initialization before probing.
    pub warmup_steps: usize,
    pub ridge: RidgePolicy,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        Self {
            probes: 64,
            normalize: true,
            warmup_steps: 50,
            ridge: RidgePolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Client-edge rounds per global round.
    pub local_rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_rounds: usize,
    /// Convergence threshold on the global parameter step.
    pub xi: f64,
    /// Aggregate the classification head together with the adapters.
    pub aggregate_head: bool,
    /// Record the full-batch gradient norm at every global model.
    pub trace_gradients: bool,
    /// Fraction of clients drawn each round by the random-subset baseline.
    pub fedavg_fraction: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            local_rounds: 5,
            lr: 0.5,
            batch_size: 8,
            max_rounds: 30,
            xi: 1e-4,
            aggregate_head: true,
            trace_gradients: false,
            fedavg_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    pub ranks: Vec<usize>,
    pub rhos: Vec<f64>,
    /// Test sequences, dealt round-robin to the virtual clients.
    pub samples: usize,
    /// Virtual clients, each with its own secret rotation.
    pub clients: usize,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            ranks: vec![8, 16],
            rhos: vec![1.0, 2.0, 4.0],
            samples: 256,
            clients: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommConfig {
    /// Ratios swept by the comm-model report.
    pub rhos: Vec<f64>,
}

impl Default for CommConfig {
    fn default() -> Self {
        Self {
            rhos: vec![1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConfig {
    pub smoothness: f64,
    pub gap: f64,
    pub sigma_local_sq: f64,
    pub sigma2_sq: f64,
    pub rounds: Vec<f64>,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            smoothness: 1.0,
            gap: 1.0,
            sigma_local_sq: 1.0,
            sigma2_sq: 0.1,
            rounds: vec![100.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub partition: PartitionSpec,
    pub topology: TopologyConfig,
    pub codec: CodecConfig,
    pub clustering: ClusteringParams,
    pub fingerprint: FingerprintConfig,
    pub training: TrainingConfig,
    pub privacy: PrivacyConfig,
    pub comm: CommConfig,
    pub bound: BoundConfig,
}

impl ExperimentConfig {
    /// Parses and validates TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ElsaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            vocab_size: self.model.vocab_size,
            seq_len: self.model.seq_len,
            n_classes: self.model.n_classes,
            markers_per_class: self.data.markers_per_class,
            distractor_prob: self.data.distractor_prob,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ElsaError::Config(m));
        self.model.validate()?;
        self.corpus_spec().validate()?;
        let t = &self.topology;
        if t.n_clients == 0 || t.n_edges == 0 {
            return bad("topology.n_clients and topology.n_edges must be >= 1".into());
        }
        if !t.latency.is_empty()
            && (t.latency.len() != t.n_clients || t.latency.iter().any(|r| r.len() != t.n_edges))
        {
            return bad(format!(
                "topology.latency must be {} rows of {} values",
                t.n_clients, t.n_edges
            ));
        }
        if let Some(u) = t.unreachable.iter().find(|&&u| u >= t.n_clients) {
            return bad(format!("topology.unreachable lists client {u} of {}", t.n_clients));
        }
        if !(t.tau_max > 0.0) || !(t.bandwidth > 0.0) {
            return bad("topology.tau_max and topology.bandwidth must be > 0".into());
        }
        if self.data.train_samples < t.n_clients {
            return bad(format!(
                "data.train_samples = {} cannot cover topology.n_clients = {}",
                self.data.train_samples, t.n_clients
            ));
        }
        if self.data.test_samples == 0 {
            return bad("data.test_samples must be >= 1".into());
        }
        self.partition.validate(t.n_clients)?;

        let c = &self.codec;
        self.codec.channel_mode()?;
        if c.rows == 0 || !(c.rho > 0.0) {
            return bad("codec.rows must be >= 1 and codec.rho > 0".into());
        }
        if c.rank == 0 || c.rank > self.model.hidden_dim || c.rank > self.fingerprint.probes {
            return bad(format!(
                "codec.rank = {} must lie in [1, min(model.hidden_dim, fingerprint.probes)]",
                c.rank
            ));
        }
        if c.zeta != 4 && c.zeta != 8 {
            return bad(format!("codec.zeta must be 4 or 8 (got {})", c.zeta));
        }
        self.clustering.validate()?;
        if self.fingerprint.probes < 2 {
            return bad("fingerprint.probes must be >= 2".into());
        }
        let tr = &self.training;
        if tr.local_rounds == 0 || tr.batch_size == 0 || tr.max_rounds == 0 {
            return bad("training.local_rounds, batch_size and max_rounds must be >= 1".into());
        }
        if !(tr.lr >= 0.0) || !tr.lr.is_finite() {
            return bad("training.lr must be finite and >= 0".into());
        }
        if !(tr.xi > 0.0) {
            return bad("training.xi must be > 0".into());
        }
        if !(tr.fedavg_fraction > 0.0 && tr.fedavg_fraction <= 1.0) {
            return bad("training.fedavg_fraction must lie in (0, 1]".into());
        }
        let p = &self.privacy;
        if p.ranks.iter().any(|&r| r == 0 || r > self.model.hidden_dim.min(self.fingerprint.probes)) {
            return bad("privacy.ranks must lie in [1, min(model.hidden_dim, fingerprint.probes)]".into());
        }
        if p.rhos.iter().chain(&self.comm.rhos).any(|r| !(*r > 0.0)) {
            return bad("privacy.rhos and comm.rhos must be > 0".into());
        }
        if p.samples == 0 || p.clients == 0 {
            return bad("privacy.samples and privacy.clients must be >= 1".into());
        }
        Ok(())
    }
}
