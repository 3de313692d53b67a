//! Data generation, communication accounting, privacy metrics and the
//! convergence bound.

pub mod bound;
pub mod comm;
pub mod data;
pub mod privacy;

pub use bound::{local_noise, running_average, theorem_bound, BoundInputs};
pub use comm::{comm_cost, comm_time, total_time, CommModel};
pub use data::{
    make_synthetic_corpus, partition_data, poison, proportional_sizes, round_robin_homes, CorpusSpec, Dataset,
    PartitionSpec, Sample,
};
pub use privacy::{privacy_eval, privacy_sweep, AttackerTable, PrivacyReport, PrivacySweep, PrivacyTally};
