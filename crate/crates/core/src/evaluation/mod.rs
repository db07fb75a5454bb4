//! Next-code accuracy, next-visit Precision@k with cross-validation, and the
//! reference baselines.

mod ablation;
mod category;
mod metrics;
mod predictors;
mod report;
mod visits;

pub use ablation::{ablation_suite, AblationVariant};
pub use category::{load_category_map, CategoryMap, CategorySource};
pub use metrics::{mean_std, precision_at_k, top_k};
pub use predictors::{next_code_accuracy, MostCommon, ModelPredictor, NextCodePredictor, Oracle, Previous};
pub use report::{EvalCell, EvalReport};
pub use visits::{
    assign_folds, evaluate_visit_prediction, split_final_visit, FrequencyScorer, ModelMassScorer, PooledHeadScorer,
    VisitScorer,
};
