//! Synthetic data, metrics, reference schemes and SNR sweeps.

pub mod baseline;
pub mod config;
pub mod dataset;
pub mod metrics;
pub mod runner;
pub mod stats;

pub use config::ExperimentConfig;
pub use dataset::{DatasetSpec, Split};
pub use runner::{
    allocation_gain, finetune_proposed, pretrain, run_snr_sweep, summarize, train_baseline2,
    write_metrics_csv, write_summary_csv, Arm, ArmModels, MetricRecord, SummaryRow,
};
