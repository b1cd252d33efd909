//! Experiment surface: configuration, synthetic data, training, benchmarks
//! and checkpoints.

mod bases;
mod bench;
mod checkpoint;
mod config;
mod data;
mod inspect;
mod method;
mod net;
mod speed;
mod train;

pub use bases::BasisSet;
pub use bench::{
    ablate_sparsity, benchmark, matched_fraction, render_benchmark, write_benchmark, AblationRow, BenchmarkOptions,
    BenchmarkReport, BenchmarkRow, BenchmarkTiming,
};
pub use checkpoint::{Checkpoint, LayerRecord, OptState, OptimizerSnapshot, SparseGradRecord};
pub use config::{ConfigOverrides, RunConfig, ALLOWED_BATCH_SIZES};
pub use data::{generate_dataset, Dataset, Split, TaskSpec};
pub use inspect::{
    inspect_basis, inspect_checkpoint, inspect_coo, BasisInfo, CheckpointInfo, CooInfo, LayerInfo, OptimizerInfo,
};
pub use method::Method;
pub use net::Footprint;
pub use speed::{layer_speed_benchmark, SpeedReport, SpeedSpec};
pub use train::{
    calibrate, initial_model, render_summary, train, write_calibration, write_outcome, CalibrationOutcome,
    DivergenceRecord, MetricsRecord, Phase, RunTiming, TimingRecord, TrainOutcome, TrainSummary,
};
