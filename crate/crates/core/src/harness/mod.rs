//! Experiment orchestration: train, CUI, split, retrain, sweep, stats, plot.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::{Candidates, CuiConfig, DatasetSource, ExperimentConfig, PhaseConfigs, StatsConfig};
pub use pipeline::{
    cui_threads, load_data, run_pipeline, run_stage, stage_cui, stage_plot, stage_retrain, stage_split, stage_stats,
    stage_sweep, stage_train, CandidateResult, CandidateSet, HarnessError, Layout, Stage, StatsReport, Summary,
    THREADS_ENV,
};
