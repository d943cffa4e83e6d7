//! Training regimes: pooled baseline, federated averaging, IIL and CIIL.

mod aggregate;
mod config;
mod exec;
mod run;
mod runlog;

pub use aggregate::{aggregate_moments, aggregate_weighted, aggregation_weights, ModelUpdate};
pub use config::{
    AdamPolicy, InstitutionOrder, StrategyConfig, StrategyKind, DEFAULT_EPOCHS_PER_ROUND,
    DEFAULT_INIT_COUNT, DEFAULT_PATIENCE,
};
pub use exec::{
    effective_spec, init_seed, initial_params, local_update, stream_seed, train_with_patience,
    Executor, Federation, InProcessExecutor, InstitutionData, InstitutionInfo, LocalTask, TaskSpec,
};
pub use run::{
    institution_order, run_centralized, run_ciil, run_collaborative, run_federated, run_iil,
    RunOptions,
};
pub use runlog::{
    forgetting_amplitude, forgetting_amplitude_of_steps, steps_from_csv, steps_to_csv, RunLog,
    StepKind, StepRecord, CSV_HEADER,
};
