//! Dense row-major `f64` matrices.
//!
//! Desk-scale sizes make cache blocking and SIMD irrelevant; what matters is
//! that every reduction has a fixed order so results are bit-reproducible.
//! Accumulators start from `+0.0`, which also guarantees a matrix product
//! never contains a negative zero.

use crate::error::{Error, Result};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

/// Dense matrix, row-major, double precision.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Matrix filled with zeros.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a flat row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "buffer of length {} cannot fill a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; rows must have equal length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dimension("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    /// A 1×n row vector.
    pub fn row_vector(data: Vec<f64>) -> Self {
        Matrix { rows: 1, cols: data.len(), data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product `self · rhs` with a fixed summation order.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(lhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Element-wise sum; shapes must match.
    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dimension("add shape mismatch".into()));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Element-wise difference; shapes must match.
    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dimension("sub shape mismatch".into()));
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Scalar multiple.
    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// Largest absolute entry (0 for an empty matrix).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| {
            let a = libm::fabs(*v);
            if a > m {
                a
            } else {
                m
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeededRng;
    use proptest::prelude::*;

    #[test]
    fn identity_is_neutral() {
        let m = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]).unwrap();
        let id = Matrix::identity(3);
        assert_eq!(id.matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&id).unwrap(), m);
    }

    #[test]
    fn hand_computed_product() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[5.0], &[6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn zeros_annihilate() {
        let m = Matrix::from_rows(&[&[1.5, -2.0], &[0.25, 9.0]]).unwrap();
        let z = Matrix::zeros(2, 2);
        assert_eq!(z.matmul(&m).unwrap(), Matrix::zeros(2, 2));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn products_never_contain_negative_zero() {
        let a = Matrix::from_rows(&[&[-0.0, 0.0], &[-1.0, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0, -0.0], &[0.5, 0.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        for v in c.data() {
            assert!(v.to_bits() != (-0.0f64).to_bits(), "got -0.0 in {c:?}");
        }
    }

    fn random_matrix(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.normal(0.0, 1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    proptest! {
        #[test]
        fn matmul_associative(seed in 0u64..1000, n in 1usize..6, m in 1usize..6, k in 1usize..6, l in 1usize..6) {
            let mut rng = SeededRng::new(seed);
            let a = random_matrix(&mut rng, n, m);
            let b = random_matrix(&mut rng, m, k);
            let c = random_matrix(&mut rng, k, l);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(right.max_abs()).max(1.0);
            let diff = left.sub(&right).unwrap().max_abs();
            prop_assert!(diff / scale < 1e-9, "relative deviation {}", diff / scale);
        }
    }
}
