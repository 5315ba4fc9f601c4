//! Design matrices over grid results: a leading intercept column of ones
//! plus one 0/1 inclusion column per attribute, with the chosen metric as
//! the response. The unit of observation is the experiment configuration.

use crate::error::{Error, Result};
use crate::experiments::grid::ResultsTable;
use crate::numerics::Matrix;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

/// Which metric column is the regression response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Response {
    Map,
    Rank1,
}

/// Regression inputs: `x` is n×(p+1) with the intercept first.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: Matrix,
    pub y: Vec<f64>,
    /// Term names: "Intercept" followed by the feature names.
    pub names: Vec<String>,
    /// Features whose column is constant over all rows; their coefficients
    /// are unidentifiable against the intercept.
    pub constant_features: Vec<String>,
}

impl DesignMatrix {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    /// Number of attribute features (excluding the intercept).
    pub fn n_features(&self) -> usize {
        self.x.cols() - 1
    }

    pub fn feature_names(&self) -> &[String] {
        &self.names[1..]
    }

    /// Feature rows without the intercept column, as plain vectors.
    pub fn feature_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n())
            .map(|r| self.x.row(r)[1..].to_vec())
            .collect()
    }
}

/// One row per successful configuration, intercept prepended. Rows that
/// failed during the grid run carry no metrics and are skipped.
pub fn build_design_matrix(table: &ResultsTable, response: Response) -> Result<DesignMatrix> {
    let rows: Vec<_> = table.ok_rows().collect();
    if rows.len() < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 result rows to build a design matrix, got {}",
            rows.len()
        )));
    }
    let p = table.feature_names.len();
    for row in &rows {
        if row.config.mask.len() != p {
            return Err(Error::Validation(format!(
                "row '{}' has a mask of length {}, expected {p}",
                row.config.label,
                row.config.mask.len()
            )));
        }
    }
    let n = rows.len();
    let mut x = Matrix::zeros(n, p + 1);
    let mut y = Vec::with_capacity(n);
    for (r, row) in rows.iter().enumerate() {
        x.set(r, 0, 1.0);
        for (c, &bit) in row.config.mask.iter().enumerate() {
            x.set(r, c + 1, if bit { 1.0 } else { 0.0 });
        }
        y.push(match response {
            Response::Map => row.map,
            Response::Rank1 => row.rank1,
        });
    }
    let mut names = Vec::with_capacity(p + 1);
    names.push("Intercept".to_string());
    names.extend(table.feature_names.iter().cloned());
    let mut constant_features = Vec::new();
    for c in 1..=p {
        let first = x.get(0, c);
        if (1..n).all(|r| x.get(r, c) == first) {
            constant_features.push(names[c].clone());
        }
    }
    Ok(DesignMatrix { x, y, names, constant_features })
}
