//! Evaluation metrics, hypothesis tests, leave-one-subject-out orchestration
//! and the confound controls.

pub mod controls;
pub mod hypothesis;
pub mod loso;
pub mod metrics;
pub mod special;

pub use hypothesis::{bootstrap_ci, ks_uniform, oneway_anova, paired_ttest, summarize, Summary, TestOutcome, TestResult};
pub use metrics::{classification_metrics, levenshtein, metrics_from_predictions, wer, Metrics};
pub use controls::{block_permutation_test, mask_early_window, null_only, PermutationReport};
pub use loso::{run_loso, FoldDecoder, FoldOutcome, FoldReport, LosoRun, LosoSummary};
