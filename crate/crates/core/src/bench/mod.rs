//! Desk-scale benchmark: synthetic tasks, a small MLP, fine-tuning and
//! continual-learning metrics.

pub mod data;
pub mod experiment;
pub mod metrics;
pub mod mlp;
pub mod objective;
pub mod train;

pub use experiment::{bench_csv, compute_uad, run_bench, run_seed, BenchConfig, Method, SeedOutcome};
pub use data::{make_task, Dataset, Split, TaskBundle};
pub use metrics::{compute_metrics, AccuracyMatrix, MetricReport};
pub use mlp::{LossKind, Mlp, MlpSpec};
pub use objective::MlpTaskObjective;
pub use train::{evaluate, train_on, train_task, Evaluation, TrainConfig, TrainReport};
