//! Dataset construction, the inference chain, baselines and benchmarks.

mod bench;
mod bundle;
mod dataset;
mod qna;
mod sweep;

use thiserror::Error;

pub use bench::{
    benchmark_scenarios, benchmark_suite, reference_count, run_scenarios, BenchGroup, BenchReport, NamedDist, Scenario,
    ScenarioResult, Suite,
};
pub use bundle::{
    infer_batch, infer_spec, infer_tandem, random_bundle, CallCounts, ChainPrediction, ModelBundle, StationPrediction,
};
pub use dataset::{
    build_summaries, build_summaries_cached, dataset_path, label_spec, read_dataset, read_summaries, records_dataset,
    role_covariates, role_dataset, role_records, role_vectors, spec_hash, write_datasets, write_summaries,
    DatasetConfig, DatasetHeader, DatasetRecord, InstanceSummary, Provenance, Rejection, Split, SplitCounts,
    SummarySet, DATASET_FORMAT, DATASET_VERSION,
};
pub use qna::{klb_wait, qna_baseline, QnaStation};
pub use sweep::{dims_grid, measure_runtime, runtime_table, sweep_csv, sweep_dims, RuntimeRow, SweepCell};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("invalid bundle: {0}")]
    Bundle(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("station {station} unstable: utilization {utilization}")]
    Unstable { station: usize, utilization: f64 },
    #[error(transparent)]
    Sim(#[from] crate::simulator::SimError),
    #[error(transparent)]
    Ph(#[from] crate::phdist::PhError),
    #[error(transparent)]
    Fit(#[from] crate::phdist::FitError),
    #[error(transparent)]
    Descriptor(#[from] crate::descriptors::DescriptorError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
