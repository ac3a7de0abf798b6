//! Fairness metrics, statistical tests, the Q-Q diagnostic and the leakage
//! probe.

pub mod metrics;
pub mod probe;
pub mod qq;
pub mod stats;

pub use metrics::{
    classification_report, demographic_parity_gap, fairness_score, macro_scores, multiclass_auc, roc_auc,
    FairnessReport, GroupMetrics, MacroScores, RocCurve,
};
pub use probe::{leakage_probe, ProbeConfig, ProbeReport};
pub use qq::{mahalanobis_qq, mahalanobis_sq, QqPlot};
pub use stats::{chi2_quantile, resampled_group_t_tests, two_sample_t_test, Metric, MetricTTest, TTest};
