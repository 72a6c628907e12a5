//! Experiment orchestration: a declarative config, resumable pipeline
//! stages with config-hash stamps, baselines as presets and the result
//! report.

mod config;
mod pipeline;
pub mod report;

pub use config::{
    BaseModel, BaselineKind, BaselineSpec, CorpusConfig, EvalConfig, ExperimentConfig, ModelDims, Preset,
    SyntheticConfig, Tasks, OUTPUT_ENV,
};
pub use pipeline::{derive_seed, hash_path, Outcome, Pipeline, Stage, Stamp};
pub use report::{Metric, Report, ReportRow};
