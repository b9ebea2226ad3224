//! Experiment plans, sweeps over them, and the reports built on top.

mod checks;
mod compare;
mod plan;
mod run;

pub use checks::{
    gradcheck, partition_stats, stats_dataset_spec, GradcheckEntry, GradcheckReport, GRADCHECK_FLOOR, GRADCHECK_SLOTS,
    GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use compare::{compare_methods, ComparisonReport, RankedMethod, SettingRanking};
pub use plan::{
    load_plan, BaseSection, CellKey, CellSpec, DatasetSection, EncoderSection, ExperimentPlan, PartitionSection,
    PromptSection, Sweep, OUT_ROOT_ENV,
};
pub use run::{
    cell_csv_path, cell_manifest_path, final_metrics_from_csv, read_summary, run_cell, run_plan, CellSummary,
    PlanReport, PlanSummary, RunManifest, RunOptions, RunStatus,
};
