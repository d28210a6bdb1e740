//! Metrics, stratified cross-validation splits, aggregation and paired
//! significance tests.

mod metrics;
mod report;
mod split;
mod stats;

pub use metrics::{
    auc, binary_metrics, confusion_matrix, one_vs_rest_metrics, BinaryMetrics, ClassMetrics, ConfusionMatrix,
    OneVsRest,
};
pub use report::{aggregate, evaluate_fold, reports_csv, FoldMetrics, FoldReport, MeanStd, RepeatReport, RunReport};
pub use split::{stratified_kfold, FoldSplit};
pub use stats::{paired_t_test, TTest};
