//! Experiment loop: generate a block, optionally poison its pilots, adapt
//! every receiver, decode the information symbols and score them.

mod block;
pub mod metrics;
mod record;
mod run;

pub use block::TransmissionBlock;
pub use metrics::{cumulative, degradation_db, per_user_ser, ser};
pub use record::{
    average_reps, config_hash, load, metadata_path, parse_results_csv, persist, results_csv,
    ser_degradation_db, ExperimentRecord, ExperimentRun, ResultRow, RESULTS_HEADER,
    RESULTS_VERSION,
};
pub use run::{
    run_experiment, run_experiment_with, DetectorReceiver, ExperimentConfig, Progress, Receiver,
    ReceiverKind,
};
