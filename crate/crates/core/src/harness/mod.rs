//! Training loop, variants, cross-validation and result files.

mod config;
mod model;
mod train;

pub use config::{RunConfig, Variant};
pub use model::{Forward, Fuser, Model};
pub use train::{
    compute_metrics, curves_from_results, eval_grid, fold_dir, format_table, read_records,
    read_summary, run_baseline, run_cv, run_variants, table_csv, train_fold, train_fold_with_model,
    write_curves, write_results, CvResult, FoldMetrics, FoldResult, MetricSummary, Summary,
    RECORDS_FILE, SUMMARY_FILE,
};
