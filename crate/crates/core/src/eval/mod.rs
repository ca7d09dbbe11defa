//! Crash rate and density/coverage F1, plus style-recovery diagnostics for synthetic data.

mod metrics;
mod protocols;
mod report;
mod style_recovery;

pub use metrics::{coverage, density, density_coverage, f1, knn_radii, knn_radius};
pub use protocols::{
    build_scenarios, evaluate_crash, evaluate_f1, EvalConfig, EvalScenario, LeaderMode, ScenarioSet,
};
pub use report::{
    aggregate, aggregate_csv, mean_two_se, AggregateRow, EvalReport, MeanSe, Metric, ScenarioRow,
};
pub use style_recovery::{prior_style_accuracy, style_consistency, style_recovery, StyleRecovery};
