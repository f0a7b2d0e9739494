//! Detection metrics, statistical tests, and evaluation reports.

mod detection;
mod report;
pub mod special;
mod stats;

pub use detection::{auroc, detect, fpr_at_tpr, DetectionResult};
pub use report::{evaluate, markdown_table, Aggregate, EvalReport, EvalRow};
pub use stats::{
    alignment_gap, bootstrap_ci_mean_diff, pearson_r, spearman_rho, welch_t_one_sided, GapReport, WelchResult,
    DEFAULT_N_BOOT, MIN_N_BOOT,
};
