//! Score combination, evaluation campaigns, analyses and reports.

mod analysis;
mod combine;
mod config;
mod data;
mod eval;
mod report;

pub use analysis::{
    fov_sweep, heading_histogram, oracle_study, random_baseline, FovRow, HeadingHistogram, OracleTable, FOV_PRESETS,
    HIGH_SCORE, HIGH_SCORE_RANKS,
};
pub use combine::{combine_rows, combine_score, score_column, InferenceCoefficients, SCORE_COLUMNS, SCORE_FLOOR};
pub use config::{InferenceConfig, SuprimConfig};
pub use data::{configure_threads, generate_dataset, label_cache_key, label_dataset, rotated_labels, THREADS_ENV};
pub use eval::{
    evaluate, evaluate_selections, run_inference, split_eval, EvalReport, ScenarioRow, SplitReports, TurnSplit,
    TURN_SPLIT_DEG,
};
pub use report::{bar_chart_svg, FovTable, Plot, ScenarioRows, Tabular};

use thiserror::Error;

use crate::evaluator::{EvalError, LabelCacheError};
use crate::planner::PlannerError;
use crate::scenario::ScenarioError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("score domain error: {0}")]
    Domain(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    LabelCache(#[from] LabelCacheError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report error: {0}")]
    Report(String),
}

#[cfg(test)]
mod tests;
