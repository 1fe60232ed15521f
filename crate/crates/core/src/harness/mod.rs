//! Experiment orchestration: teachers, derived datasets, student trials,
//! the architecture grid and result tables.

mod config;
mod grid;
mod pipeline;
mod report;

pub use config::{Cell, ExperimentConfig, StudentSize, TaskData, TaskSource, DROPOUT_ON};
pub use grid::{grid_tsv, GridPoint, GridSpec, GRID_HEADER};
pub use pipeline::{
    run_experiment, run_pipeline, table_cells, Pipeline, PipelineReport, ResultRow, TrialResult,
    TABLE_RECIPES,
};
pub use report::{
    convergence_checkpoint, emit_tables_and_curves, render_report, write_report, Report,
};
