//! `elsa-sim`: runs training, clustering, privacy sweeps and the analytic
//! communication and bound models from a TOML experiment config.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 for
//! anything that fails while running.

mod output;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use clap::{Args, Parser, Subcommand, ValueEnum};
use elsa_core::config::ExperimentConfig;
use elsa_core::metrics::{theorem_bound, BoundInputs};
use elsa_core::protocol::{comm_sweep, compute_alpha, normalize_alphas, run_method, run_privacy, Method, Simulation};
use elsa_core::ElsaError;
use serde::Serialize;

const SEED_ENV: &str = "ELSA_SIM_SEED";

#[derive(Parser)]
#[command(name = "elsa-sim", version, about = "Hierarchical split fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML experiment config. Missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed, or a comma-separated list for a sweep. Takes precedence over
    /// ELSA_SIM_SEED, which takes precedence over the config.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory (default: the config's out_dir, else ./out). A sweep
    /// writes each seed to its own seed-<n> subdirectory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Sweep points evaluated concurrently.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Fedavg,
    FedavgRandom,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train with ELSA or a baseline; writes the per-round log and a summary.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Fingerprint and cluster only; writes the assignment table and the
    /// divergence matrix.
    Cluster {
        #[command(flatten)]
        common: Common,
    },
    /// Boundary-activation leakage of every channel mode over the rho and
    /// rank grid.
    PrivacyEval {
        #[command(flatten)]
        common: Common,
    },
    /// Modelled bytes and time per round for each configured ratio.
    CommModel {
        #[command(flatten)]
        common: Common,
    },
    /// Convergence bound for each global round count. Flags override the
    /// config's [bound] section.
    Bound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        smoothness: Option<f64>,
        #[arg(long)]
        gap: Option<f64>,
        #[arg(long)]
        sigma_local_sq: Option<f64>,
        #[arg(long)]
        sigma2_sq: Option<f64>,
        /// Comma-separated global round counts.
        #[arg(long, value_delimiter = ',')]
        rounds: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Config(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ElsaError> for Failure {
    fn from(e: ElsaError) -> Self {
        match e {
            ElsaError::Config(_) | ElsaError::Usage(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(format!("i/o error: {e}"))
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        None => Ok(ExperimentConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn resolve_seeds(common: &Common, cfg: &ExperimentConfig) -> Result<Vec<u64>, Failure> {
    if !common.seed.is_empty() {
        return Ok(common.seed.clone());
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(|s| vec![s])
            .map_err(|_| Failure::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(vec![cfg.seed]),
    }
}

/// One fully resolved sweep point: config with its seed, drawn poisoned ids
/// and output directory filled in.
struct Job {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

fn plan(common: &Common) -> Result<Vec<Job>, Failure> {
    let base = load_config(common.config.as_deref())?;
    let seeds = resolve_seeds(common, &base)?;
    let root = match (&common.out_dir, base.out_dir.as_str()) {
        (Some(d), _) => d.clone(),
        (None, "") => PathBuf::from("out"),
        (None, d) => PathBuf::from(d),
    };
    seeds
        .iter()
        .map(|&s| {
            let mut cfg = base.clone();
            cfg.seed = s;
            cfg.partition = cfg.partition.resolve(cfg.topology.n_clients, s)?;
            let dir = if seeds.len() > 1 {
                root.join(format!("seed-{s}"))
            } else {
                root.clone()
            };
            cfg.out_dir = dir.display().to_string();
            cfg.validate()?;
            Ok(Job { cfg, dir })
        })
        .collect()
}

fn execute(common: &Common, task: impl Fn(&ExperimentConfig, &Path) -> Outcome + Sync) -> Outcome {
    let jobs = plan(common)?;
    let width = (common.jobs as usize).min(jobs.len()).max(1);
    let run_one = |job: &Job| -> Outcome {
        fs::create_dir_all(&job.dir)?;
        task(&job.cfg, &job.dir)
    };
    let mut results: Vec<Outcome> = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(width) {
        if chunk.len() == 1 {
            results.push(run_one(&chunk[0]));
            continue;
        }
        let run_one = &run_one;
        thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|j| s.spawn(move || run_one(j))).collect();
            for h in handles {
                results.push(
                    h.join()
                        .unwrap_or_else(|_| Err(Failure::Runtime("worker panicked".into()))),
                );
            }
        });
    }
    let mut first = None;
    for (job, r) in jobs.iter().zip(results) {
        if let Err(e) = r {
            if jobs.len() > 1 {
                eprintln!("elsa-sim: seed {}: {e}", job.cfg.seed);
            }
            first.get_or_insert(e);
        }
    }
    first.map_or(Ok(()), Err)
}

#[derive(Serialize)]
struct RunSummary<'a> {
    method: &'a str,
    rounds: usize,
    converged: bool,
    final_accuracy: f64,
    final_loss: f64,
    total_comm_bytes: f64,
    elapsed_time: f64,
    edge_weights: &'a [f64],
}

fn cmd_run(cfg: &ExperimentConfig, dir: &Path, method: Method) -> Outcome {
    let name = method.label();
    let csv_path = dir.join(format!("training-{name}.csv"));
    let schema = "elsa-sim/training-log/v1";
    match run_method(cfg, method) {
        Ok(log) => {
            output::write_csv(&csv_path, schema, cfg, &output::rows_to_csv(&log.records)?)?;
            let summary = RunSummary {
                method: name,
                rounds: log.rounds(),
                converged: log.converged,
                final_accuracy: log.final_accuracy(),
                final_loss: log.final_loss(),
                total_comm_bytes: log.records.iter().map(|r| r.comm_bytes).sum(),
                elapsed_time: log.records.last().map_or(0.0, |r| r.elapsed_time),
                edge_weights: &log.edge_weights,
            };
            output::write_json(
                &dir.join(format!("summary-{name}.json")),
                "elsa-sim/run-summary/v1",
                cfg,
                &summary,
            )?;
            Ok(())
        }
        Err(e) => {
            let note = format!("# error: {e}\n");
            output::write_csv(&csv_path, schema, cfg, &note)?;
            Err(e.into())
        }
    }
}

#[derive(Serialize)]
struct AssignmentRow {
    client: usize,
    status: &'static str,
    edge: Option<usize>,
    group: Option<usize>,
    trust: f64,
    inverse_confidence: f64,
    mean_divergence: f64,
    poisoned: bool,
    reason: &'static str,
}

#[derive(Serialize)]
struct EdgeSummary {
    edge: usize,
    members: Vec<usize>,
    groups: Vec<Vec<usize>>,
    mean_trust: f64,
    coherence: f64,
    weight: f64,
}

#[derive(Serialize)]
struct ExcludedClient {
    client: usize,
    reason: &'static str,
}

#[derive(Serialize)]
struct ClusterSummary {
    gamma: f64,
    assigned: usize,
    edges: Vec<EdgeSummary>,
    excluded: Vec<ExcludedClient>,
}

fn cmd_cluster(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let sim = Simulation::new(cfg)?;
    let fp = sim.fingerprints()?;
    let asg = sim.cluster(&fp)?;
    let n = sim.n_clients();

    let rows: Vec<AssignmentRow> = (0..n)
        .map(|c| {
            let edge = asg.edge_of[c];
            let group = edge.and_then(|k| asg.edges[k].groups.iter().position(|g| g.contains(&c)));
            let exclusion = asg.exclusion(c);
            AssignmentRow {
                client: c,
                status: if edge.is_some() { "assigned" } else { "excluded" },
                edge,
                group,
                trust: fp.trust[c],
                inverse_confidence: fp.terms.inverse_confidence[c],
                mean_divergence: fp.terms.mean_divergence[c],
                poisoned: cfg.partition.poisoned.contains(&c),
                reason: exclusion.map_or("", |e| e.label()),
            }
        })
        .collect();
    output::write_csv(
        &dir.join("assignment.csv"),
        "elsa-sim/assignment/v1",
        cfg,
        &output::rows_to_csv(&rows)?,
    )?;

    let head: Vec<String> = std::iter::once("client".to_string())
        .chain((0..n).map(|j| format!("c{j}")))
        .collect();
    let body: Vec<Vec<String>> = (0..n)
        .map(|i| {
            std::iter::once(i.to_string())
                .chain((0..n).map(|j| fp.divergence.get(i, j).to_string()))
                .collect()
        })
        .collect();
    output::write_csv(
        &dir.join("divergence.csv"),
        "elsa-sim/divergence/v1",
        cfg,
        &output::records_to_csv(&head, &body)?,
    )?;

    let active: Vec<usize> = asg
        .edges
        .iter()
        .filter(|e| !e.members.is_empty())
        .map(|e| e.edge)
        .collect();
    let raw = active
        .iter()
        .map(|&k| compute_alpha(asg.edges[k].coherence, asg.edges[k].mean_trust))
        .collect::<Result<Vec<_>, _>>()?;
    let alphas = normalize_alphas(&raw)?;
    let mut weights = vec![0.0; asg.edges.len()];
    for (&k, &a) in active.iter().zip(&alphas) {
        weights[k] = a;
    }
    let summary = ClusterSummary {
        gamma: cfg.clustering.effective_gamma(&fp.divergence),
        assigned: asg.n_assigned(),
        edges: asg
            .edges
            .iter()
            .map(|e| EdgeSummary {
                edge: e.edge,
                members: e.members.clone(),
                groups: e.groups.clone(),
                mean_trust: e.mean_trust,
                coherence: e.coherence,
                weight: weights[e.edge],
            })
            .collect(),
        excluded: asg
            .excluded
            .iter()
            .map(|&(client, e)| ExcludedClient {
                client,
                reason: e.label(),
            })
            .collect(),
    };
    output::write_json(&dir.join("cluster.json"), "elsa-sim/cluster-summary/v1", cfg, &summary)?;
    Ok(())
}

fn cmd_privacy(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let reports = run_privacy(cfg)?;
    output::write_csv(
        &dir.join("privacy.csv"),
        "elsa-sim/privacy/v1",
        cfg,
        &output::rows_to_csv(&reports)?,
    )?;
    Ok(())
}

fn cmd_comm(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let rows = comm_sweep(cfg)?;
    output::write_csv(
        &dir.join("comm-model.csv"),
        "elsa-sim/comm-model/v1",
        cfg,
        &output::rows_to_csv(&rows)?,
    )?;
    Ok(())
}

#[derive(Serialize)]
struct BoundRow {
    rounds: f64,
    bound: f64,
}

fn cmd_bound(cfg: &ExperimentConfig, dir: &Path) -> Outcome {
    let b = &cfg.bound;
    if b.rounds.is_empty() {
        return Err(Failure::Config("usage error: the list of global round counts is empty".into()));
    }
    let rows = b
        .rounds
        .iter()
        .map(|&g| {
            let inputs = BoundInputs {
                smoothness: b.smoothness,
                gap: b.gap,
                sigma_local_sq: b.sigma_local_sq,
                sigma2_sq: b.sigma2_sq,
                rounds: g,
            };
            theorem_bound(&inputs)
                .map(|bound| BoundRow { rounds: g, bound })
                .map_err(|e| Failure::Config(format!("usage error: {e}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    output::write_csv(&dir.join("bound.csv"), "elsa-sim/bound/v1", cfg, &output::rows_to_csv(&rows)?)?;
    Ok(())
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Run { common, baseline } => {
            let method = match baseline {
                None => Method::Elsa,
                Some(Baseline::Fedavg) => Method::Fedavg,
                Some(Baseline::FedavgRandom) => Method::FedavgRandom,
            };
            execute(&common, |cfg, dir| cmd_run(cfg, dir, method))
        }
        Command::Cluster { common } => execute(&common, cmd_cluster),
        Command::PrivacyEval { common } => execute(&common, cmd_privacy),
        Command::CommModel { common } => execute(&common, cmd_comm),
        Command::Bound {
            common,
            smoothness,
            gap,
            sigma_local_sq,
            sigma2_sq,
            rounds,
        } => execute(&common, |cfg, dir| {
            let mut cfg = cfg.clone();
            let b = &mut cfg.bound;
            b.smoothness = smoothness.unwrap_or(b.smoothness);
            b.gap = gap.unwrap_or(b.gap);
            b.sigma_local_sq = sigma_local_sq.unwrap_or(b.sigma_local_sq);
            b.sigma2_sq = sigma2_sq.unwrap_or(b.sigma2_sq);
            if let Some(r) = &rounds {
                b.rounds = r.clone();
            }
            cmd_bound(&cfg, dir)
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("elsa-sim: {e}");
            ExitCode::from(e.code())
        }
    }
}
