//! Experiment harness: error accumulation over decoding steps, activation
//! range statistics, ablations and reports.

mod ablation;
mod config;
mod error;
mod report;
mod stats;

pub use ablation::{
    ablation_cells, build_calibration, evaluate_config, run_ablation, run_pipeline, split_prompts,
    AblationCell, AblationRow, AblationSetup, AblationTable, CellSummary, CgqVariant, PromptSplit,
};
pub use config::{parse_seeds, ActMethod, QuantConfig, SEED_ENV};
pub use error::{
    final_token_agreement, measure_step_error, ErrorMode, StepErrorReport, StepErrorRow,
};
pub use report::{emit_report, Report, ReportBody, ReportFormat};
pub use stats::{
    activation_range_stats, max_relative_range_shift, write_range_csv, RangeRow, RANGE_SITES,
};
