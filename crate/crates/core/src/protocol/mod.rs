//! End-to-end orchestration: split training inside each edge cluster, edge
//! consolidation, weighted cloud aggregation, and the FedAvg baselines.

pub mod aggregate;
pub mod link;
pub mod run;
pub mod setup;

pub use aggregate::{
    check_convergence, compute_alpha, edge_consolidate, global_aggregate, normalize_alphas, param_distance,
};
pub use link::{local_split_round, split_gradients, ClientLink, RoundTraffic, SplitStep};
pub use run::{
    comm_sweep, evaluate, evaluate_split, full_gradient_norm_sq, grad_norm_trace, random_subset, run_elsa, run_elsa_with,
    run_fedavg, run_fedavg_with, run_method, run_privacy, CommRow, Method, RoundRecord, TrainingLog,
};
pub use setup::{batch_indices, FingerprintStage, Simulation};
