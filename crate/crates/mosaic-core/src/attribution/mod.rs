//! The statistical attribute-importance pipeline: Gaussian GLM with normal
//! inference, random-forest importances (impurity and permutation), exact
//! interventional Shapley values, Welch t-tests and pooled Cohen's d.

pub mod design;
pub mod forest;
pub mod glm;
pub mod report;
pub mod shapley;
pub mod special;
pub mod ttest;

pub use design::{build_design_matrix, DesignMatrix, Response};
pub use forest::{fit_rf, impurity_importance, permutation_importance, Regressor, RfModel, RfParams};
pub use glm::{fit_glm, GlmTerm, GLMFit};
pub use report::{full_report, FeatureImportanceRow, FullReport, ImportanceReport};
pub use shapley::{shapley_values, ShapleyResult};
pub use ttest::{cohens_d, welch_ttest, WelchTest};
