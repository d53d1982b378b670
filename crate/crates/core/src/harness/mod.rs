//! Experiment orchestration: configuration, dataset generation with splits,
//! the degradation grid, robustness and retraining experiments, reports.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;

pub use config::{derive_seed, Contrast, ExperimentConfig, GridEntry, ORIGINAL_TAG};
pub use dataset::{
    build_degraded_variants, ensure_dataset, generate_dataset, load_split, DatasetManifest, Split,
};
pub use experiment::{
    cam_localization, run_retrain_experiment, run_robustness_experiment, train_models,
    CamLocalization, ReportKind, RobustnessReport, VariantSummary,
};
pub use report::{render_report, summary_csv};

#[cfg(test)]
mod tests;
