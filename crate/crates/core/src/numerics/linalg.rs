//! Dense row-major matrices and symmetric positive-definite solves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First jitter tried when a plain factorization fails.
pub const JITTER_START: f64 = 1e-6;
/// Largest jitter before giving up.
pub const JITTER_MAX: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn col_to_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "hstack of {} and {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Self {
            rows: self.rows,
            cols,
            data,
        })
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix, together
/// with the diagonal jitter that was needed to obtain it.
#[derive(Clone, Debug)]
pub struct Cholesky {
    factor: Matrix,
    jitter: f64,
}

fn cholesky_in_place(a: &mut Matrix) -> bool {
    let n = a.rows;
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= a[(j, k)] * a[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= a[(i, k)] * a[(j, k)];
            }
            a[(i, j)] = s / d;
        }
        for k in (j + 1)..n {
            a[(j, k)] = 0.0;
        }
    }
    true
}

impl Cholesky {
    /// Factor `matrix + jitter * I`. If that fails, escalate the jitter from
    /// [`JITTER_START`] by factors of ten up to [`JITTER_MAX`].
    pub fn factor(matrix: &Matrix, jitter: f64) -> Result<Self> {
        if matrix.rows != matrix.cols {
            return Err(Error::Shape(format!(
                "Cholesky of non-square {}x{} matrix",
                matrix.rows, matrix.cols
            )));
        }
        if jitter < 0.0 {
            return Err(Error::Domain(format!("negative jitter {jitter}")));
        }
        let mut current = jitter;
        loop {
            let mut a = matrix.clone();
            for i in 0..a.rows {
                a[(i, i)] += current;
            }
            if cholesky_in_place(&mut a) {
                return Ok(Self {
                    factor: a,
                    jitter: current,
                });
            }
            let next = if current < JITTER_START {
                JITTER_START
            } else {
                current * 10.0
            };
            if next > JITTER_MAX * (1.0 + 1e-9) {
                return Err(Error::NotPositiveDefinite { jitter: current });
            }
            current = next;
        }
    }

    pub fn factor_matrix(&self) -> &Matrix {
        &self.factor
    }

    /// Jitter actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.factor.rows
    }

    /// Solve `L y = b` in place.
    pub fn forward_solve(&self, b: &mut [f64]) {
        let l = &self.factor;
        for i in 0..l.rows {
            let mut s = b[i];
            let row = l.row(i);
            for k in 0..i {
                s -= row[k] * b[k];
            }
            b[i] = s / row[i];
        }
    }

    /// Solve `L^T x = y` in place.
    pub fn backward_solve(&self, b: &mut [f64]) {
        let l = &self.factor;
        for i in (0..l.rows).rev() {
            let mut s = b[i];
            for k in (i + 1)..l.rows {
                s -= l[(k, i)] * b[k];
            }
            b[i] = s / l[(i, i)];
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward_solve(&mut x);
        self.backward_solve(&mut x);
        x
    }

    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        if rhs.rows != self.dim() {
            return Err(Error::Shape(format!(
                "rhs has {} rows, system has {}",
                rhs.rows,
                self.dim()
            )));
        }
        let mut out = Matrix::zeros(rhs.rows, rhs.cols);
        for j in 0..rhs.cols {
            let x = self.solve_vec(&rhs.col_to_vec(j));
            for (i, v) in x.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }

    pub fn log_det(&self) -> f64 {
        (0..self.dim())
            .map(|i| self.factor[(i, i)].ln())
            .sum::<f64>()
            * 2.0
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let x = self.solve_vec(&e);
            for i in 0..n {
                inv[(i, j)] = x[i];
            }
        }
        inv
    }
}

/// Solve `(matrix + jitter I) x = rhs` for symmetric positive-definite
/// `matrix`, escalating the jitter if the factorization fails.
pub fn psd_solve(matrix: &Matrix, rhs: &Matrix, jitter: f64) -> Result<Matrix> {
    Cholesky::factor(matrix, jitter)?.solve(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn random_spd(n: usize, rng: &mut RngStream) -> Matrix {
        let a = Matrix::from_fn(n, n, |_, _| rng.normal());
        let mut s = a.matmul(&a.transpose()).unwrap();
        for i in 0..n {
            s[(i, i)] += n as f64 * 0.1;
        }
        s
    }

    #[test]
    fn identity_and_diagonal_systems() {
        let b = Matrix::column(&[1.0, -2.0, 3.0]);
        assert_eq!(psd_solve(&Matrix::identity(3), &b, 0.0).unwrap(), b);
        let d = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let x = psd_solve(&d, &Matrix::column(&[1.0, 1.0]), 0.0).unwrap();
        assert!(x.max_abs_diff(&Matrix::column(&[0.5, 0.25])) < 1e-15);
    }

    #[test]
    fn random_system_residual() {
        let mut rng = RngStream::new(11, 0);
        let a = random_spd(5, &mut rng);
        let b = Matrix::from_fn(5, 1, |_, _| rng.normal());
        let x = psd_solve(&a, &b, 1e-6).unwrap();
        let mut aj = a.clone();
        for i in 0..5 {
            aj[(i, i)] += 1e-6;
        }
        let r = aj.matmul(&x).unwrap();
        assert!(r.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn large_systems_reproduce_rhs() {
        let mut rng = RngStream::new(3, 1);
        for &n in &[20, 80, 200] {
            let a = random_spd(n, &mut rng);
            let b = Matrix::from_fn(n, 2, |_, _| rng.normal());
            let x = psd_solve(&a, &b, 0.0).unwrap();
            let r = a.matmul(&x).unwrap();
            let rel = r.max_abs_diff(&b) / b.frobenius();
            assert!(rel < 1e-8, "n={n} rel={rel:e}");
        }
    }

    #[test]
    fn jitter_escalates_for_singular_matrix() {
        let ones = Matrix::from_fn(4, 4, |_, _| 1.0);
        let c = Cholesky::factor(&ones, 0.0).unwrap();
        assert!(c.jitter() >= JITTER_START && c.jitter() <= JITTER_MAX);
    }

    #[test]
    fn indefinite_matrix_fails_after_schedule() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        match Cholesky::factor(&m, 0.0) {
            Err(Error::NotPositiveDefinite { jitter }) => assert!((jitter - JITTER_MAX).abs() < 1e-12),
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn log_det_and_inverse() {
        let mut rng = RngStream::new(5, 5);
        let a = random_spd(6, &mut rng);
        let c = Cholesky::factor(&a, 0.0).unwrap();
        let inv = c.inverse();
        let id = a.matmul(&inv).unwrap();
        assert!(id.max_abs_diff(&Matrix::identity(6)) < 1e-10);
        let d = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        assert!((Cholesky::factor(&d, 0.0).unwrap().log_det() - 8f64.ln()).abs() < 1e-14);
    }
}
