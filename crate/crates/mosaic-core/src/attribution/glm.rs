//! Gaussian GLM with identity link: the least-squares solution through a
//! Householder QR decomposition, with normal-theory inference (SE from the
//! estimated scale and the `(XᵀX)⁻¹` diagonal, z statistics, two-sided
//! normal p-values, 95% intervals at the exact normal quantile).

use crate::attribution::design::DesignMatrix;
use crate::attribution::special::{normal_two_sided_p, Z_975};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// One fitted term. `z` and `p` are absent when the residual scale is zero
/// (a perfectly interpolated response has no sampling noise to test
/// against).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GlmTerm {
    pub name: String,
    pub coef: f64,
    pub se: f64,
    pub z: Option<f64>,
    pub p: Option<f64>,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Full fit: per-term inference plus the scale estimate `RSS/(n-p-1)`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GLMFit {
    pub terms: Vec<GlmTerm>,
    pub scale: f64,
    pub n: usize,
    /// Number of attribute features (excluding the intercept).
    pub p: usize,
}

impl GLMFit {
    pub fn term(&self, name: &str) -> Option<&GlmTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Householder QR of an n×k matrix (n >= k): returns the upper-triangular
/// R (k×k) and Qᵀy.
fn householder_qr(x: &Matrix, y: &[f64]) -> (Matrix, Vec<f64>) {
    let (n, k) = x.shape();
    let mut a = x.clone();
    let mut qty = y.to_vec();
    for col in 0..k {
        // norm of the column below the diagonal
        let mut norm = 0.0;
        for r in col..n {
            norm += a.get(r, col) * a.get(r, col);
        }
        let norm = libm::sqrt(norm);
        if norm == 0.0 {
            continue;
        }
        let alpha = if a.get(col, col) >= 0.0 { -norm } else { norm };
        // v = x_col - alpha * e_col
        let mut v = vec![0.0; n];
        for r in col..n {
            v[r] = a.get(r, col);
        }
        v[col] -= alpha;
        let vtv: f64 = v[col..].iter().map(|u| u * u).sum();
        if vtv == 0.0 {
            continue;
        }
        // apply H = I - 2vvᵀ/vᵀv to the remaining columns and to y
        for c in col..k {
            let dot: f64 = (col..n).map(|r| v[r] * a.get(r, c)).sum();
            let f = 2.0 * dot / vtv;
            for r in col..n {
                a.set(r, c, a.get(r, c) - f * v[r]);
            }
        }
        let dot: f64 = (col..n).map(|r| v[r] * qty[r]).sum();
        let f = 2.0 * dot / vtv;
        for r in col..n {
            qty[r] -= f * v[r];
        }
    }
    let mut r_mat = Matrix::zeros(k, k);
    for r in 0..k {
        for c in r..k {
            r_mat.set(r, c, a.get(r, c));
        }
    }
    (r_mat, qty)
}

/// Back-substitution `R·b = rhs` for upper-triangular R.
fn back_substitute(r: &Matrix, rhs: &[f64]) -> Vec<f64> {
    let k = r.rows();
    let mut b = vec![0.0; k];
    for i in (0..k).rev() {
        let mut acc = rhs[i];
        for j in (i + 1)..k {
            acc -= r.get(i, j) * b[j];
        }
        b[i] = acc / r.get(i, i);
    }
    b
}

/// Ordinary least squares with normal inference.
///
/// Rank deficiency is detected from the R diagonal; the error names the
/// aliased columns (those whose diagonal entry collapses).
pub fn fit_glm(dm: &DesignMatrix) -> Result<GLMFit> {
    let (n, k) = dm.x.shape();
    if n <= k {
        return Err(Error::Dataset(format!(
            "need more observations than terms to estimate the scale (n={n}, terms={k})"
        )));
    }
    let (r, qty) = householder_qr(&dm.x, &dm.y);
    // rank check against a scaled tolerance
    let max_diag = (0..k).fold(0.0f64, |m, i| {
        let v = libm::fabs(r.get(i, i));
        if v > m {
            v
        } else {
            m
        }
    });
    let tol = max_diag * 1e-12 + 1e-300;
    let aliased: Vec<String> = (0..k)
        .filter(|&i| libm::fabs(r.get(i, i)) <= tol)
        .map(|i| dm.names[i].clone())
        .collect();
    if !aliased.is_empty() {
        return Err(Error::SingularDesign(format!(
            "design is rank deficient; aliased columns: {}",
            aliased.join(", ")
        )));
    }
    let beta = back_substitute(&r, &qty[..k]);

    // residual scale
    let mut rss = 0.0;
    for row in 0..n {
        let mut fitted = 0.0;
        for c in 0..k {
            fitted += dm.x.get(row, c) * beta[c];
        }
        let resid = dm.y[row] - fitted;
        rss += resid * resid;
    }
    let scale = rss / (n - k) as f64;

    // (XᵀX)⁻¹ = R⁻¹ R⁻ᵀ via k back-substitutions
    let mut r_inv = Matrix::zeros(k, k);
    for col in 0..k {
        let mut e = vec![0.0; k];
        e[col] = 1.0;
        let col_vals = back_substitute(&r, &e);
        for row in 0..k {
            r_inv.set(row, col, col_vals[row]);
        }
    }
    let mut terms = Vec::with_capacity(k);
    for i in 0..k {
        let cov_ii: f64 = (0..k).map(|j| r_inv.get(i, j) * r_inv.get(i, j)).sum();
        let se = libm::sqrt(scale * cov_ii);
        let (z, p) = if se > 0.0 {
            let z = beta[i] / se;
            (Some(z), Some(normal_two_sided_p(z)))
        } else {
            (None, None)
        };
        terms.push(GlmTerm {
            name: dm.names[i].clone(),
            coef: beta[i],
            se,
            z,
            p,
            ci_low: beta[i] - Z_975 * se,
            ci_high: beta[i] + Z_975 * se,
        });
    }
    Ok(GLMFit { terms, scale, n, p: k - 1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::design::{build_design_matrix, Response};
    use crate::experiments::grid::{ExperimentConfig, ResultsRow, ResultsTable};
    use crate::numerics::SeededRng;
    use alloc::string::ToString;

    fn results(feature_names: &[&str], rows: Vec<(Vec<bool>, f64)>) -> ResultsTable {
        ResultsTable {
            dataset_tag: "test".into(),
            feature_names: feature_names.iter().map(|s| s.to_string()).collect(),
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(i, (mask, map))| ResultsRow {
                    config: ExperimentConfig::new(&format!("r{i}"), mask),
                    map,
                    rank1: map,
                    error: None,
                })
                .collect(),
        }
    }

    // Independent oracle: solve the normal equations XᵀXβ = Xᵀy by Gaussian
    // elimination with partial pivoting, and invert XᵀX the same way.
    fn normal_equation_fit(dm: &DesignMatrix) -> (Vec<f64>, Vec<f64>, f64) {
        let (n, k) = dm.x.shape();
        let mut xtx = vec![vec![0.0f64; k]; k];
        let mut xty = vec![0.0f64; k];
        for r in 0..n {
            for i in 0..k {
                xty[i] += dm.x.get(r, i) * dm.y[r];
                for j in 0..k {
                    xtx[i][j] += dm.x.get(r, i) * dm.x.get(r, j);
                }
            }
        }
        // augmented [XᵀX | Xᵀy | I]
        let mut aug = vec![vec![0.0f64; 2 * k + 1]; k];
        for i in 0..k {
            for j in 0..k {
                aug[i][j] = xtx[i][j];
            }
            aug[i][k] = xty[i];
            aug[i][k + 1 + i] = 1.0;
        }
        for col in 0..k {
            let pivot = (col..k)
                .max_by(|&a, &b| {
                    libm::fabs(aug[a][col])
                        .partial_cmp(&libm::fabs(aug[b][col]))
                        .unwrap()
                })
                .unwrap();
            aug.swap(col, pivot);
            let div = aug[col][col];
            for j in 0..2 * k + 1 {
                aug[col][j] /= div;
            }
            for row in 0..k {
                if row != col {
                    let f = aug[row][col];
                    for j in 0..2 * k + 1 {
                        aug[row][j] -= f * aug[col][j];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..k).map(|i| aug[i][k]).collect();
        let mut rss = 0.0;
        for r in 0..n {
            let fitted: f64 = (0..k).map(|c| dm.x.get(r, c) * beta[c]).sum();
            rss += (dm.y[r] - fitted) * (dm.y[r] - fitted);
        }
        let scale = rss / (n - k) as f64;
        let se: Vec<f64> = (0..k).map(|i| libm::sqrt(scale * aug[i][k + 1 + i])).collect();
        (beta, se, scale)
    }

    fn random_table(seed: u64, n: usize, p: usize) -> ResultsTable {
        let mut rng = SeededRng::new(seed);
        let names: Vec<String> = (0..p).map(|i| format!("f{i}")).collect();
        let mut rows = Vec::new();
        for i in 0..n {
            let mask: Vec<bool> = (0..p).map(|_| rng.uniform() < 0.5).collect();
            let y = 80.0
                + mask.iter().enumerate().map(|(j, &b)| if b { 0.3 * j as f64 } else { 0.0 }).sum::<f64>()
                + rng.normal(0.0, 0.5);
            rows.push(ResultsRow {
                config: ExperimentConfig::new(&format!("r{i}"), mask),
                map: y,
                rank1: y,
                error: None,
            });
        }
        ResultsTable { dataset_tag: "rand".into(), feature_names: names, rows }
    }

    #[test]
    fn qr_matches_normal_equations() {
        // two algorithms, one answer
        for seed in [1u64, 2, 3] {
            let table = random_table(seed, 24, 5);
            let dm = build_design_matrix(&table, Response::Map).unwrap();
            let fit = fit_glm(&dm).unwrap();
            let (beta, se, scale) = normal_equation_fit(&dm);
            for (i, term) in fit.terms.iter().enumerate() {
                assert!((term.coef - beta[i]).abs() < 1e-9, "coef {i}");
                assert!((term.se - se[i]).abs() < 1e-9, "se {i}");
            }
            assert!((fit.scale - scale).abs() < 1e-9);
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_design() {
        let table = random_table(7, 30, 6);
        let dm = build_design_matrix(&table, Response::Map).unwrap();
        let fit = fit_glm(&dm).unwrap();
        let (n, k) = dm.x.shape();
        for c in 0..k {
            let mut dot = 0.0;
            for r in 0..n {
                let fitted: f64 =
                    (0..k).map(|j| dm.x.get(r, j) * fit.terms[j].coef).sum();
                dot += dm.x.get(r, c) * (dm.y[r] - fitted);
            }
            assert!(dot.abs() < 1e-8, "column {c} residual dot {dot}");
        }
    }

    #[test]
    fn rank_deficiency_names_the_aliased_column() {
        // feature b duplicates feature a
        let t = results(
            &["a", "b"],
            vec![
                (vec![true, true], 90.0),
                (vec![false, false], 91.0),
                (vec![true, true], 92.0),
                (vec![false, false], 89.5),
            ],
        );
        let dm = build_design_matrix(&t, Response::Map).unwrap();
        match fit_glm(&dm) {
            Err(Error::SingularDesign(msg)) => assert!(msg.contains('b'), "{msg}"),
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn constant_response_reports_not_applicable_inference() {
        let t = results(
            &["a"],
            vec![
                (vec![true], 90.0),
                (vec![false], 90.0),
                (vec![true], 90.0),
                (vec![false], 90.0),
            ],
        );
        let dm = build_design_matrix(&t, Response::Map).unwrap();
        let fit = fit_glm(&dm).unwrap();
        assert_eq!(fit.scale, 0.0);
        let intercept = fit.term("Intercept").unwrap();
        assert!((intercept.coef - 90.0).abs() < 1e-12);
        assert_eq!(intercept.se, 0.0);
        assert!(intercept.z.is_none() && intercept.p.is_none());
        let slope = fit.term("a").unwrap();
        assert!(slope.coef.abs() < 1e-12);
        assert_eq!(slope.ci_low, slope.coef);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let t = results(&["a"], vec![(vec![true], 90.0), (vec![false], 91.0)]);
        let dm = build_design_matrix(&t, Response::Map).unwrap();
        assert!(fit_glm(&dm).is_err()); // n = k = 2
    }
}
