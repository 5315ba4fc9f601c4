//! The combined importance report: GLM, random-forest FIMP/PIMP, mean
//! absolute Shapley attributions and per-feature hypothesis tests, emitted
//! as one document with per-analysis error recording rather than a single
//! all-or-nothing failure.

use crate::attribution::design::{build_design_matrix, DesignMatrix, Response};
use crate::attribution::forest::{fit_rf, impurity_importance, permutation_importance, RfParams};
use crate::attribution::glm::{fit_glm, GLMFit};
use crate::attribution::shapley::shapley_values;
use crate::attribution::ttest::{cohens_d, partition, welch_ttest};
use crate::error::Result;
use crate::experiments::grid::ResultsTable;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Per-feature summary across every analysis; missing analyses carry their
/// error text in `errors`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureImportanceRow {
    pub name: String,
    pub fimp: Option<f64>,
    pub pimp: Option<f64>,
    pub mean_abs_shapley: Option<f64>,
    pub t: Option<f64>,
    pub df: Option<f64>,
    pub p: Option<f64>,
    pub cohens_d: Option<f64>,
    pub errors: Vec<String>,
}

/// Machine-learning and hypothesis-testing importances for one response.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImportanceReport {
    pub response: Response,
    pub rows: Vec<FeatureImportanceRow>,
    pub rf_params: RfParams,
    pub pimp_repeats: usize,
    pub seed: u64,
    /// Analysis-level failures (forest fit, Shapley enumeration, ...).
    pub errors: Vec<String>,
}

/// The full document: GLM section plus the importance section.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FullReport {
    pub glm: Option<GLMFit>,
    pub glm_error: Option<String>,
    pub importance: ImportanceReport,
}

fn mean_abs_shapley(
    model: &crate::attribution::forest::RfModel,
    dm: &DesignMatrix,
) -> Result<Vec<f64>> {
    let rows = dm.feature_rows();
    let mut acc = alloc::vec![0.0; dm.n_features()];
    for row in &rows {
        let result = shapley_values(model, row, &rows)?;
        for (a, v) in acc.iter_mut().zip(&result.values) {
            *a += libm::fabs(*v);
        }
    }
    for a in &mut acc {
        *a /= rows.len() as f64;
    }
    Ok(acc)
}

/// Run every analysis over a results table. Individual failures degrade the
/// report instead of aborting it; the GLM section carries its own error
/// slot, per-feature test failures land in the feature rows.
pub fn full_report(
    table: &ResultsTable,
    response: Response,
    rf_params: &RfParams,
    pimp_repeats: usize,
    seed: u64,
) -> Result<FullReport> {
    let dm = build_design_matrix(table, response)?;
    let feature_names = dm.feature_names().to_vec();

    let (glm, glm_error) = match fit_glm(&dm) {
        Ok(fit) => (Some(fit), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let mut analysis_errors = Vec::new();
    let mut fimp = None;
    let mut pimp = None;
    let mut shap = None;
    match fit_rf(&dm, rf_params, seed) {
        Ok(model) => {
            fimp = Some(impurity_importance(&model));
            match permutation_importance(&model, &dm, pimp_repeats, seed) {
                Ok(v) => pimp = Some(v),
                Err(e) => analysis_errors.push(alloc::format!("permutation importance: {e}")),
            }
            match mean_abs_shapley(&model, &dm) {
                Ok(v) => shap = Some(v),
                Err(e) => analysis_errors.push(alloc::format!("shapley: {e}")),
            }
        }
        Err(e) => analysis_errors.push(alloc::format!("random forest: {e}")),
    }

    let mut rows = Vec::with_capacity(feature_names.len());
    for (i, name) in feature_names.iter().enumerate() {
        let mut errors = Vec::new();
        let flags: Vec<bool> = (0..dm.n()).map(|r| dm.x.get(r, i + 1) == 1.0).collect();
        let (excluded, included) = partition(&dm.y, &flags);
        let (t, df, p) = match welch_ttest(&excluded, &included) {
            Ok(res) => (Some(res.t), Some(res.df), Some(res.p)),
            Err(e) => {
                errors.push(alloc::format!("welch: {e}"));
                (None, None, None)
            }
        };
        let d = match cohens_d(&excluded, &included) {
            Ok(d) => Some(d),
            Err(e) => {
                errors.push(alloc::format!("cohens_d: {e}"));
                None
            }
        };
        rows.push(FeatureImportanceRow {
            name: name.clone(),
            fimp: fimp.as_ref().map(|v| v[i]),
            pimp: pimp.as_ref().map(|v| v[i]),
            mean_abs_shapley: shap.as_ref().map(|v| v[i]),
            t,
            df,
            p,
            cohens_d: d,
            errors,
        });
    }

    Ok(FullReport {
        glm,
        glm_error,
        importance: ImportanceReport {
            response,
            rows,
            rf_params: rf_params.clone(),
            pimp_repeats,
            seed,
            errors: analysis_errors,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::grid::{ExperimentConfig, ResultsRow, ResultsTable};
    use crate::numerics::SeededRng;
    use alloc::format;
    use alloc::vec;

    fn random_table(seed: u64, n: usize, p: usize) -> ResultsTable {
        let mut rng = SeededRng::new(seed);
        let names: Vec<String> = (0..p).map(|i| format!("f{i}")).collect();
        let rows = (0..n)
            .map(|i| {
                let mask: Vec<bool> = (0..p).map(|_| rng.uniform() < 0.5).collect();
                let y = 85.0
                    + if mask[0] { 2.0 } else { 0.0 }
                    + rng.normal(0.0, 0.4);
                ResultsRow {
                    config: ExperimentConfig::new(&format!("r{i}"), mask),
                    map: y,
                    rank1: y - 1.0,
                    error: None,
                }
            })
            .collect();
        ResultsTable { dataset_tag: "rand".into(), feature_names: names, rows }
    }

    #[test]
    fn full_report_populates_every_section() {
        let table = random_table(3, 20, 3);
        let params = RfParams { n_trees: 60, ..RfParams::default() };
        let report = full_report(&table, Response::Map, &params, 5, 42).unwrap();
        assert!(report.glm.is_some(), "glm failed: {:?}", report.glm_error);
        assert!(report.importance.errors.is_empty(), "{:?}", report.importance.errors);
        assert_eq!(report.importance.rows.len(), 3);
        for row in &report.importance.rows {
            assert!(row.fimp.is_some() && row.pimp.is_some());
            assert!(row.mean_abs_shapley.is_some());
            assert!(row.t.is_some() && row.p.is_some() && row.cohens_d.is_some());
            assert!(row.errors.is_empty(), "{:?}", row.errors);
        }
        // the driving feature dominates the Shapley magnitudes
        let shap0 = report.importance.rows[0].mean_abs_shapley.unwrap();
        for row in &report.importance.rows[1..] {
            assert!(shap0 > row.mean_abs_shapley.unwrap());
        }
    }

    #[test]
    fn two_row_table_degrades_gracefully() {
        let table = ResultsTable {
            dataset_tag: "tiny".into(),
            feature_names: vec!["a".into()],
            rows: vec![
                ResultsRow {
                    config: ExperimentConfig::new("r0", vec![true]),
                    map: 91.0,
                    rank1: 95.0,
                    error: None,
                },
                ResultsRow {
                    config: ExperimentConfig::new("r1", vec![false]),
                    map: 90.0,
                    rank1: 94.0,
                    error: None,
                },
            ],
        };
        let report =
            full_report(&table, Response::Map, &RfParams { n_trees: 10, ..RfParams::default() }, 2, 1)
                .unwrap();
        // GLM cannot estimate a scale from n = terms
        assert!(report.glm.is_none());
        assert!(report.glm_error.is_some());
        // t-tests need two observations per side: recorded per feature
        let row = &report.importance.rows[0];
        assert!(row.t.is_none());
        assert!(!row.errors.is_empty());
    }

    #[test]
    fn report_is_deterministic() {
        let table = random_table(9, 16, 2);
        let params = RfParams { n_trees: 30, ..RfParams::default() };
        let a = full_report(&table, Response::Rank1, &params, 3, 7).unwrap();
        let b = full_report(&table, Response::Rank1, &params, 3, 7).unwrap();
        assert_eq!(a, b);
    }
}
