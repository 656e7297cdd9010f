//! Small dense linear algebra.
//!
//! Everything here targets the handful-of-parameters regime (a few dozen
//! rows at most on the square side), so storage is a flat row-major `Vec`
//! and the algorithms are the textbook ones: Cholesky for SPD solves and
//! cyclic Jacobi rotations for symmetric eigenvalues.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// Builds a matrix from row vectors; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.cols {
            return Err(Error::Dimension(format!(
                "matrix has {} columns, vector has {} entries",
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ * v`.
    pub fn tr_matvec(&self, v: &[T]) -> Result<Vec<T>> {
        if v.len() != self.rows {
            return Err(Error::Dimension(format!(
                "matrix has {} rows, vector has {} entries",
                self.rows,
                v.len()
            )));
        }
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    /// `self * selfᵀ`.
    pub fn gram(&self) -> Self {
        let mut out = Self::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in i..self.rows {
                let v = dot(self.row(i), self.row(j));
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "shape {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&a| a * a).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Replaces the matrix by `(A + Aᵀ)/2`.
    pub fn symmetrized(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| half * (self[(i, j)] + self[(j, i)]))
    }

    /// Quadratic form `xᵀ A y`.
    pub fn bilinear(&self, x: &[T], y: &[T]) -> Result<T> {
        let ay = self.matvec(y)?;
        if x.len() != ay.len() {
            return Err(Error::Dimension("bilinear form operand length".into()));
        }
        Ok(dot(x, &ay))
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    l: Matrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    pub fn new(a: &Matrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension("cholesky of non-square matrix".into()));
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) {
                return Err(Error::Conditioning {
                    what: "matrix is not positive definite".into(),
                    ratio: 0.0,
                    tol: T::conditioning_tol().to_f64_lossy(),
                });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { l })
    }

    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        let n = self.l.rows();
        if b.len() != n {
            return Err(Error::Dimension("cholesky solve right-hand side".into()));
        }
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[(i, k)];
                y[i] = y[i] - lik * y[k];
            }
            y[i] = y[i] / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = self.l[(k, i)];
                y[i] = y[i] - lki * y[k];
            }
            y[i] = y[i] / self.l[(i, i)];
        }
        Ok(y)
    }

    /// `‖L⁻¹ g‖² = gᵀ A⁻¹ g`, non-negative by construction.
    pub fn inv_quadratic(&self, g: &[T]) -> Result<T> {
        let n = self.l.rows();
        if g.len() != n {
            return Err(Error::Dimension("cholesky quadratic operand".into()));
        }
        let mut y = g.to_vec();
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[(i, k)];
                y[i] = y[i] - lik * y[k];
            }
            y[i] = y[i] / self.l[(i, i)];
        }
        Ok(dot(&y, &y))
    }

    pub fn inverse(&self) -> Matrix<T> {
        let n = self.l.rows();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve(&e).expect("square factor");
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv.symmetrized()
    }
}

/// Eigenvalues of a symmetric matrix, ascending.
///
/// Cyclic Jacobi; the input is symmetrized first so tiny asymmetries from
/// round-off do not matter.
pub fn sym_eigenvalues<T: Scalar>(a: &Matrix<T>) -> Result<Vec<T>> {
    if !a.is_square() {
        return Err(Error::Dimension("eigenvalues of non-square matrix".into()));
    }
    let n = a.rows();
    let mut m = a.symmetrized();
    let scale = m.frobenius_norm();
    if scale == T::zero() {
        return Ok(vec![T::zero(); n]);
    }
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in i + 1..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= T::epsilon() * scale * T::lit(1e-2) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ev)
}

/// Checks that a symmetric positive semidefinite Gram matrix is invertible
/// within the relative tolerance `λ_min / λ_max ≥ tol`, and returns its
/// Cholesky factor.
pub fn factor_gram<T: Scalar>(gram: &Matrix<T>, what: &str) -> Result<Cholesky<T>> {
    let ev = sym_eigenvalues(gram)?;
    let tol = T::conditioning_tol();
    let max = ev.last().copied().unwrap_or(T::zero());
    let min = ev.first().copied().unwrap_or(T::zero());
    let ratio = if max > T::zero() { min / max } else { T::zero() };
    if !(ratio >= tol) {
        return Err(Error::Conditioning {
            what: what.to_string(),
            ratio: ratio.to_f64_lossy(),
            tol: tol.to_f64_lossy(),
        });
    }
    Cholesky::new(gram).map_err(|_| Error::Conditioning {
        what: what.to_string(),
        ratio: ratio.to_f64_lossy(),
        tol: tol.to_f64_lossy(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let ch = Cholesky::new(&a).unwrap();
        let x = ch.solve(&[2.0, 1.0]).unwrap();
        let back = a.matvec(&x).unwrap();
        assert_relative_eq!(back[0], 2.0, epsilon = 1e-14);
        assert_relative_eq!(back[1], 1.0, epsilon = 1e-14);
        let inv = ch.inverse();
        let id = a.matmul(&inv).unwrap();
        assert!(id.sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(Cholesky::new(&a), Err(Error::Conditioning { .. })));
    }

    #[test]
    fn jacobi_matches_closed_form_2x2() {
        // eigenvalues of [[a,b],[b,d]] are (a+d)/2 ± sqrt(((a-d)/2)^2 + b^2)
        let (a, b, d) = (3.0_f64, 1.5, -2.0);
        let m = Matrix::from_rows(&[vec![a, b], vec![b, d]]).unwrap();
        let ev = sym_eigenvalues(&m).unwrap();
        let mid = (a + d) / 2.0;
        let rad = (((a - d) / 2.0).powi(2) + b * b).sqrt();
        assert_relative_eq!(ev[0], mid - rad, epsilon = 1e-12);
        assert_relative_eq!(ev[1], mid + rad, epsilon = 1e-12);
    }

    #[test]
    fn jacobi_trace_and_determinant_3x3() {
        let m = Matrix::from_rows(&[
            vec![2.0, -1.0, 0.5],
            vec![-1.0, 3.0, 0.25],
            vec![0.5, 0.25, 1.0],
        ])
        .unwrap();
        let ev = sym_eigenvalues(&m).unwrap();
        let trace: f64 = ev.iter().sum();
        let det: f64 = ev.iter().product();
        // det by cofactor expansion
        let det_ref = 2.0 * (3.0 * 1.0 - 0.25 * 0.25) - (-1.0) * (-1.0 * 1.0 - 0.25 * 0.5)
            + 0.5 * (-1.0 * 0.25 - 3.0 * 0.5);
        assert_relative_eq!(trace, 6.0, epsilon = 1e-12);
        assert_relative_eq!(det, det_ref, epsilon = 1e-12);
    }

    #[test]
    fn factor_gram_flags_rank_deficiency() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]]).unwrap();
        assert!(matches!(
            factor_gram(&x.gram(), "XXᵀ"),
            Err(Error::Conditioning { .. })
        ));
        let ok = Matrix::from_rows(&[vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]]).unwrap();
        assert!(factor_gram(&ok.gram(), "XXᵀ").is_ok());
    }

    #[test]
    fn works_in_single_precision() {
        let a = Matrix::<f32>::from_rows(&[vec![4.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let x = Cholesky::new(&a).unwrap().solve(&[1.0, 1.0]).unwrap();
        let r = a.matvec(&x).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-5 && (r[1] - 1.0).abs() < 1e-5);
    }
}
