//! Global training loops for ELSA and the FedAvg baselines.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::codec::{buckets_for_ratio, compression_ratio};
use crate::config::ExperimentConfig;
use crate::error::{ElsaError, Result};
use crate::fingerprint::{build_probe_set, extract_fingerprint};
use crate::metrics::{
    comm_cost, comm_time, make_synthetic_corpus, privacy_sweep, total_time, CommModel, Dataset, PrivacyReport,
    PrivacySweep,
};
use crate::model::{Head, SplitModel, TrainableParams};
use crate::par::par_map;
use crate::protocol::aggregate::{
    check_convergence, compute_alpha, edge_consolidate, global_aggregate, normalize_alphas, param_distance,
};
use crate::protocol::link::{local_split_round, ClientLink};
use crate::protocol::setup::Simulation;
use crate::seed::{self, tag};

/// Sketch round ids at or above this value are reserved for evaluation.
const EVAL_ROUND_BASE: u64 = 1 << 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Elsa,
    Fedavg,
    FedavgRandom,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elsa" => Ok(Self::Elsa),
            "fedavg" => Ok(Self::Fedavg),
            "fedavg-random" => Ok(Self::FedavgRandom),
            other => Err(ElsaError::Config(format!(
                "unknown method '{other}' (expected elsa, fedavg or fedavg-random)"
            ))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Elsa => "elsa",
            Self::Fedavg => "fedavg",
            Self::FedavgRandom => "fedavg-random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    /// `||theta_g - theta_{g-1}||`, with `theta_0` the shared initialization.
    pub delta_norm: f64,
    /// Modelled bytes for the round.
    pub comm_bytes: f64,
    /// Activation bytes actually pushed through the links.
    pub activation_bytes: usize,
    pub gradient_bytes: usize,
    /// Cumulative simulated communication time, seconds.
    pub elapsed_time: f64,
    pub participants: usize,
    pub grad_norm_sq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub method: Method,
    pub records: Vec<RoundRecord>,
    pub converged: bool,
    /// Normalized cloud weight of every edge (0 for edges without clients).
    pub edge_weights: Vec<f64>,
    pub final_params: TrainableParams,
}

impl TrainingLog {
    pub fn rounds(&self) -> usize {
        self.records.len()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.eval_accuracy)
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.train_loss)
    }
}

/// Per-round squared full-batch gradient norms recorded during the run.
pub fn grad_norm_trace(log: &TrainingLog) -> Result<Vec<f64>> {
    log.records
        .iter()
        .map(|r| {
            r.grad_norm_sq.ok_or_else(|| {
                ElsaError::Unavailable("gradient tracing was disabled (training.trace_gradients = false)".into())
            })
        })
        .collect()
}

/// Full-batch gradient norm squared on `data`.
pub fn full_gradient_norm_sq(sim: &Simulation, params: &TrainableParams, data: &Dataset) -> Result<f64> {
    let chunks: Vec<&[crate::metrics::Sample]> = data.samples.chunks(64).collect();
    let parts = par_map(&chunks, |c| -> Result<TrainableParams> {
        let mut g = params.zeros_like();
        for s in c.iter() {
            let (_, gi) = sim.model.loss_and_grad(params, &s.tokens, s.label)?;
            g.axpy(1.0, &gi);
        }
        Ok(g)
    });
    let mut g = params.zeros_like();
    for p in parts {
        g.axpy(1.0, &p?);
    }
    g.scale(1.0 / data.len().max(1) as f64);
    Ok(g.norm().powi(2))
}

/// Accuracy of the unsplit model on clean labels.
pub fn evaluate(sim: &Simulation, params: &TrainableParams, data: &Dataset) -> Result<f64> {
    let hits = par_map(&data.samples, |s| sim.model.predict(params, &s.tokens).map(|p| p == s.clean_label))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / data.len().max(1) as f64)
}

/// Accuracy through the participants' links: test sample `i` goes through
/// the `i mod m`-th assigned client, with that client's head.
pub fn evaluate_split(
    sim: &Simulation,
    params: &TrainableParams,
    heads: &[Head],
    links: &[ClientLink],
    clients: &[usize],
    data: &Dataset,
) -> Result<f64> {
    if clients.is_empty() {
        return Err(ElsaError::Protocol("no clients to evaluate through".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let hits = par_map(&idx, |&i| -> Result<bool> {
        let n = clients[i % clients.len()];
        let mut p = params.clone();
        p.head = heads[n].clone();
        let s = &data.samples[i];
        let logits = links[n].logits(&sim.model, &p, &s.tokens, EVAL_ROUND_BASE + i as u64)?;
        Ok(logits.argmax().0 == s.clean_label)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / data.len().max(1) as f64)
}

fn aggregated_len(cfg: &ExperimentConfig, p: &TrainableParams) -> usize {
    if cfg.training.aggregate_head {
        p.len()
    } else {
        p.adapter_len()
    }
}

fn comm_model(cfg: &ExperimentConfig, theta: &TrainableParams, rho: f64, bandwidth: f64) -> CommModel {
    CommModel {
        zeta: cfg.codec.zeta as f64,
        seq_len: cfg.model.seq_len as f64,
        rho,
        bandwidth,
        lora_bytes: (aggregated_len(cfg, theta) * cfg.codec.zeta) as f64,
    }
}

struct EdgeOutcome {
    model: TrainableParams,
    clients: Vec<(usize, TrainableParams)>,
    loss: f64,
    steps: usize,
    activation_bytes: usize,
    gradient_bytes: usize,
}

fn train_edge(
    sim: &Simulation,
    asg: &ClusterAssignment,
    links: &[ClientLink],
    edge: usize,
    g: usize,
    global: &TrainableParams,
    heads: &[Head],
) -> Result<EdgeOutcome> {
    let cfg = &sim.cfg;
    let members = &asg.edges[edge].members;
    let mut theta2 = global.theta2.clone();
    let mut clients: Vec<(usize, TrainableParams)> = members
        .iter()
        .map(|&n| {
            let mut p = global.clone();
            p.head = heads[n].clone();
            (n, p)
        })
        .collect();
    let (mut loss, mut steps, mut act, mut grad) = (0.0, 0, 0, 0);
    let rounds = cfg.training.local_rounds;
    for r in 0..rounds {
        let mut order: Vec<usize> = (0..clients.len()).collect();
        order.shuffle(&mut seed::rng_for(&[tag::ORDER, cfg.seed, g as u64, r as u64, edge as u64]));
        for i in order {
            let (n, ref mut p) = clients[i];
            let batch = sim.batch(n, &[g as u64, r as u64]);
            let round_id = ((g - 1) * rounds + r) as u64;
            let t = local_split_round(
                &sim.model,
                asg,
                n,
                edge,
                &links[n],
                p,
                &mut theta2,
                &batch,
                cfg.training.lr,
                round_id,
            )?;
            loss += t.loss;
            steps += 1;
            act += t.activation_bytes();
            grad += t.gradient_bytes;
        }
    }
    let weighted: Vec<(&TrainableParams, usize)> = clients.iter().map(|(n, p)| (p, sim.shards[*n].len())).collect();
    let model = edge_consolidate(&weighted, &theta2)?;
    Ok(EdgeOutcome {
        model,
        clients,
        loss,
        steps,
        activation_bytes: act,
        gradient_bytes: grad,
    })
}

/// Fingerprint, cluster, then train.
pub fn run_elsa(cfg: &ExperimentConfig) -> Result<TrainingLog> {
    let sim = Simulation::new(cfg)?;
    let fp = sim.fingerprints()?;
    let asg = sim.cluster(&fp)?;
    let links = sim.links(&fp)?;
    run_elsa_with(&sim, &asg, &links)
}

pub fn run_elsa_with(sim: &Simulation, asg: &ClusterAssignment, links: &[ClientLink]) -> Result<TrainingLog> {
    let cfg = &sim.cfg;
    let tr = &cfg.training;
    let active: Vec<usize> = asg
        .edges
        .iter()
        .filter(|e| !e.members.is_empty())
        .map(|e| e.edge)
        .collect();
    if active.is_empty() {
        return Err(ElsaError::Protocol("clustering excluded every client".into()));
    }
    let raw: Vec<f64> = active
        .iter()
        .map(|&k| compute_alpha(asg.edges[k].coherence, asg.edges[k].mean_trust))
        .collect::<Result<_>>()?;
    let alphas = normalize_alphas(&raw)?;
    let mut edge_weights = vec![0.0; asg.edges.len()];
    for (&k, &a) in active.iter().zip(&alphas) {
        edge_weights[k] = a;
    }

    let participants: Vec<usize> = asg.assigned().collect();
    let dim = cfg.model.hidden_dim;
    let comm = comm_model(cfg, &sim.theta0, cfg.codec.effective_rho(dim)?, sim.topology.bandwidth);
    let batch_sizes: Vec<f64> = participants
        .iter()
        .map(|&n| tr.batch_size.min(sim.shards[n].len()) as f64)
        .collect();
    let round_bytes = comm_cost(&comm, active.len(), &batch_sizes, tr.local_rounds as f64, dim as f64);
    let times: Vec<f64> = batch_sizes
        .iter()
        .map(|&b| comm_time(&comm, tr.local_rounds as f64, b, dim as f64))
        .collect();

    let mut theta = sim.theta0.clone();
    let mut heads: Vec<Head> = vec![theta.head.clone(); sim.n_clients()];
    let mut prev: Option<TrainableParams> = None;
    let mut records = Vec::new();
    let mut converged = false;
    for g in 1..=tr.max_rounds {
        let outcomes = par_map(&active, |&k| train_edge(sim, asg, links, k, g, &theta, &heads))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let edge_models: Vec<TrainableParams> = outcomes.iter().map(|o| o.model.clone()).collect();
        let mut next = global_aggregate(&edge_models, &alphas)?;
        if !tr.aggregate_head {
            next.head = theta.head.clone();
            for o in &outcomes {
                for (n, p) in &o.clients {
                    heads[*n] = p.head.clone();
                }
            }
        } else {
            heads.iter_mut().for_each(|h| *h = next.head.clone());
        }
        if !next.is_finite() {
            return Err(ElsaError::Numeric(format!("global model diverged at round {g}")));
        }
        let steps: usize = outcomes.iter().map(|o| o.steps).sum();
        let eval_accuracy = evaluate_split(sim, &next, &heads, links, &participants, &sim.test)?;
        let grad_norm_sq = if tr.trace_gradients {
            Some(full_gradient_norm_sq(sim, &next, &sim.pooled())?)
        } else {
            None
        };
        records.push(RoundRecord {
            round: g,
            train_loss: outcomes.iter().map(|o| o.loss).sum::<f64>() / steps.max(1) as f64,
            eval_accuracy,
            delta_norm: param_distance(&next, &theta),
            comm_bytes: round_bytes,
            activation_bytes: outcomes.iter().map(|o| o.activation_bytes).sum(),
            gradient_bytes: outcomes.iter().map(|o| o.gradient_bytes).sum(),
            elapsed_time: total_time(g as f64, &times),
            participants: participants.len(),
            grad_norm_sq,
        });
        converged = check_convergence(&next, prev.as_ref(), tr.xi);
        prev = Some(next.clone());
        theta = next;
        if converged {
            break;
        }
    }
    Ok(TrainingLog {
        method: Method::Elsa,
        records,
        converged,
        edge_weights,
        final_params: theta,
    })
}

pub fn run_fedavg(cfg: &ExperimentConfig, random_clients: bool) -> Result<TrainingLog> {
    let sim = Simulation::new(cfg)?;
    run_fedavg_with(&sim, random_clients)
}

/// Clients drawn by the random-subset baseline in round `g`.
pub fn random_subset(cfg: &ExperimentConfig, n_clients: usize, g: usize) -> Vec<usize> {
    let m = ((cfg.training.fedavg_fraction * n_clients as f64).round() as usize).clamp(1, n_clients);
    let mut rng = seed::rng_for(&[tag::SUBSET, cfg.seed, g as u64]);
    let mut s = sample(&mut rng, n_clients, m).into_vec();
    s.sort_unstable();
    s
}

/// Single-server FedAvg over unsplit models, all clients or a random subset
/// each round, no trust filtering and no compression.
pub fn run_fedavg_with(sim: &Simulation, random_clients: bool) -> Result<TrainingLog> {
    let cfg = &sim.cfg;
    let tr = &cfg.training;
    let n = sim.n_clients();
    let model_bytes = (aggregated_len(cfg, &sim.theta0) * cfg.codec.zeta) as f64;
    let mut theta = sim.theta0.clone();
    let mut prev: Option<TrainableParams> = None;
    let mut records = Vec::new();
    let mut converged = false;
    let mut elapsed = 0.0;
    for g in 1..=tr.max_rounds {
        let chosen: Vec<usize> = if random_clients {
            random_subset(cfg, n, g)
        } else {
            (0..n).collect()
        };
        let results = par_map(&chosen, |&c| -> Result<(TrainableParams, f64)> {
            let mut p = theta.clone();
            let mut loss = 0.0;
            for r in 0..tr.local_rounds {
                let batch = sim.batch(c, &[g as u64, r as u64]);
                let (l, grad) = sim.model.batch_loss_and_grad(&p, &batch)?;
                p.axpy(-tr.lr, &grad);
                loss += l;
            }
            Ok((p, loss / tr.local_rounds as f64))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let sizes: Vec<f64> = chosen.iter().map(|&c| sim.shards[c].len() as f64).collect();
        let total: f64 = sizes.iter().sum();
        let weights: Vec<f64> = sizes.iter().map(|s| s / total).collect();
        let models: Vec<TrainableParams> = results.iter().map(|(p, _)| p.clone()).collect();
        let mut next = global_aggregate(&models, &weights)?;
        if !tr.aggregate_head {
            // no per-client heads without a split; the head stays at its initial value
            next.head = theta.head.clone();
        }
        if !next.is_finite() {
            return Err(ElsaError::Numeric(format!("global model diverged at round {g}")));
        }
        elapsed += 2.0 * model_bytes / sim.topology.bandwidth;
        let grad_norm_sq = if tr.trace_gradients {
            Some(full_gradient_norm_sq(sim, &next, &sim.pooled())?)
        } else {
            None
        };
        records.push(RoundRecord {
            round: g,
            train_loss: results.iter().map(|(_, l)| l).sum::<f64>() / results.len() as f64,
            eval_accuracy: evaluate(sim, &next, &sim.test)?,
            delta_norm: param_distance(&next, &theta),
            comm_bytes: 2.0 * model_bytes * chosen.len() as f64,
            activation_bytes: 0,
            gradient_bytes: 0,
            elapsed_time: elapsed,
            participants: chosen.len(),
            grad_norm_sq,
        });
        converged = check_convergence(&next, prev.as_ref(), tr.xi);
        prev = Some(next.clone());
        theta = next;
        if converged {
            break;
        }
    }
    Ok(TrainingLog {
        method: if random_clients { Method::FedavgRandom } else { Method::Fedavg },
        records,
        converged,
        edge_weights: Vec::new(),
        final_params: theta,
    })
}

pub fn run_method(cfg: &ExperimentConfig, method: Method) -> Result<TrainingLog> {
    match method {
        Method::Elsa => run_elsa(cfg),
        Method::Fedavg => run_fedavg(cfg, false),
        Method::FedavgRandom => run_fedavg(cfg, true),
    }
}

/// Boundary privacy of every channel mode for the configured grid, seen by
/// an edge that knows the frozen backbone. Uses the freshly initialized
/// model, whose Part 1 equals the public backbone.
pub fn run_privacy(cfg: &ExperimentConfig) -> Result<Vec<PrivacyReport>> {
    cfg.validate()?;
    let m = &cfg.model;
    let model = SplitModel::new(m.clone(), cfg.seed)?;
    let params = model.init_params(cfg.seed);
    let probe = build_probe_set(cfg.seed, cfg.fingerprint.probes, m.seq_len, m.vocab_size)?;
    let fp = extract_fingerprint(&model, &params, &probe, cfg.fingerprint.ridge)?;
    let data = make_synthetic_corpus(
        seed::derive(&[tag::PRIVACY, cfg.seed]),
        &cfg.corpus_spec(),
        cfg.privacy.samples,
    )?;
    let sweep = PrivacySweep {
        ranks: cfg.privacy.ranks.clone(),
        rhos: cfg.privacy.rhos.clone(),
        rows: cfg.codec.rows,
        salt: cfg.codec.salt.as_bytes().to_vec(),
        clients: cfg.privacy.clients,
    };
    privacy_sweep(&model, &params, &fp.embeddings, &data.samples, &sweep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommRow {
    pub target_rho: f64,
    pub buckets: usize,
    /// Ratio achieved with the integer bucket count.
    pub rho: f64,
    pub activation_bytes: f64,
    pub lora_bytes: f64,
    pub round_bytes: f64,
    pub client_time: f64,
    pub total_time: f64,
}

/// Predicted traffic per global round for each ratio in `comm.rhos`, with
/// every client active at the configured batch size on all edges and
/// `training.max_rounds` global rounds.
pub fn comm_sweep(cfg: &ExperimentConfig) -> Result<Vec<CommRow>> {
    cfg.validate()?;
    let model = SplitModel::new(cfg.model.clone(), cfg.seed)?;
    let theta = model.init_params(cfg.seed);
    let dim = cfg.model.hidden_dim;
    let rounds = cfg.training.local_rounds as f64;
    let batches = vec![cfg.training.batch_size as f64; cfg.topology.n_clients];
    cfg.comm
        .rhos
        .iter()
        .map(|&target| {
            let buckets = buckets_for_ratio(dim, cfg.codec.rows, target);
            let m = comm_model(cfg, &theta, compression_ratio(dim, cfg.codec.rows, buckets), cfg.topology.bandwidth);
            m.validate()?;
            let round_bytes = comm_cost(&m, cfg.topology.n_edges, &batches, rounds, dim as f64);
            let client_time = comm_time(&m, rounds, cfg.training.batch_size as f64, dim as f64);
            let k_lora = cfg.topology.n_edges as f64 * m.lora_bytes;
            Ok(CommRow {
                target_rho: target,
                buckets,
                rho: m.rho,
                activation_bytes: comm_cost(&m, 0, &batches, rounds, dim as f64),
                lora_bytes: k_lora,
                round_bytes,
                client_time,
                total_time: total_time(cfg.training.max_rounds as f64, &[client_time]),
            })
        })
        .collect()
}
