//! Dataset generation, training, evaluation and the experiment drivers.

pub mod ablate;
pub mod bench;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod train;

pub use ablate::{ablate, default_variants, kernel_variants, AblationRow, Variant};
pub use bench::{bench, BenchReport, ModeTiming};
pub use config::{derive_seed, DataConfig, RunConfig, TrainConfig};
pub use dataset::{make_dataset, Dataset, DatasetManifest, Sample, Split};
pub use eval::{evaluate, infer_one, metrics_from_records, InferenceRecord};
pub use gradcheck::{run_gradcheck, CheckLine, GradcheckSummary};
pub use train::{load_model, train, train_step, EpochLog, StepLog, StepStats, TrainOptions, TrainOutcome, TrainState};
