//! Configuration, training, multi-seed experiments and the baseline.

mod config;
mod experiment;
mod gcn;
mod train;

pub use config::{DatasetConfig, IpwSetting, RunConfig, Variant};
pub use experiment::{
    run_ablation_grid, run_experiment, run_prepared, ExperimentRecord, ReportRow, ReportTable, SeedRun, THREADS_ENV,
};
pub use gcn::{Gcn, GcnConfig};
pub use train::{
    fit, train_one, EarlyStopping, EpochRecord, FitOutcome, FitSettings, Prepared, Progress, TrainOutcome, TrainedModel,
};
