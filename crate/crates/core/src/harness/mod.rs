//! Experiment harness: configuration, checkpoints, results files and the
//! drivers behind the `train`, `eval`, `ablate` and `bench` commands.

pub mod checkpoint;
pub mod config;
pub mod results;
pub mod run;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ExperimentConfig, OptimizerKind, SourceKind};
pub use results::{append_results, mean_ci95, RunRecord, RESULTS_HEADER};
pub use run::{
    ablation_subsets, build_sources, derive_seed, evaluate_many, evaluate_model, run_ablation, run_bench,
    run_eval, run_train, strategy_label, train_model, BenchRow, Sources, TrainReport,
};
