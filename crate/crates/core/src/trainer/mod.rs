//! Training orchestration: configuration, triplet batches, the optimization
//! step, evaluation and resumable runs.

mod batch;
mod check;
mod config;
mod run;
mod step;

pub use batch::{
    batch_seed, build_batch, epoch_batches, epoch_order, num_workers, BatchRecipe, TrainingSet,
    TripletBatch, NUM_WORKERS_ENV,
};
pub use check::network_gradcheck;
pub use config::{DataSource, Precision, TrainConfig};
pub use run::{
    build_model, dry_run, load_checkpoint_model, prepare_data, read_log, run, run_typed, DryRun,
    PreparedData, RunOptions, RunOutcome, LOG_HEADER,
};
pub use step::{
    evaluate, evaluate_samples, train_step, NoObserver, StepEvent, StepLosses, StepObserver,
    TrainState,
};
