//! Dense complex matrices.
//!
//! Storage is row-major `Complex64`, i.e. interleaved `(re, im)` pairs of
//! `f64`. Sizes in this crate are small (a handful of antennas and users,
//! at most a few thousand RIS elements), so everything is naive dense code.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Diagonal matrix with the given entries.
    pub fn diag(entries: &[Complex64]) -> Self {
        let mut m = Self::zeros(entries.len(), entries.len());
        for (i, &e) in entries.iter().enumerate() {
            m[(i, i)] = e;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<Complex64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn matmul(&self, other: &CMatrix) -> Result<CMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = CMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &CMatrix) -> Result<CMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(CMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: Complex64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn transpose(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Hermitian transpose.
    pub fn adjoint(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    /// Squared Frobenius norm, i.e. `trace(A Aᴴ)`.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Largest entry-wise absolute difference.
    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Solves `A x = b` for square `A` by LU with partial pivoting.
    ///
    /// Returns `None` when a pivot magnitude falls below `pivot_tol` times the
    /// largest entry of `A`.
    pub fn solve(&self, b: &[Complex64], pivot_tol: f64) -> Result<Option<Vec<Complex64>>> {
        let rhs = CMatrix::from_vec(b.len(), 1, b.to_vec())?;
        Ok(self.solve_columns(&rhs, pivot_tol)?.map(|x| x.data))
    }

    /// Solves `A X = B` for every column of `B` with one factorization.
    pub fn solve_columns(&self, b: &CMatrix, pivot_tol: f64) -> Result<Option<CMatrix>> {
        let n = self.rows;
        if self.cols != n || b.rows != n {
            return Err(Error::Shape {
                op: "solve",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let k_cols = b.cols;
        let scale = self.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return Ok(None);
        }
        let mut a = self.data.clone();
        let mut x = b.data.clone();
        for k in 0..n {
            let (p, pmag) = (k..n)
                .map(|r| (r, a[r * n + k].norm()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmag <= pivot_tol * scale {
                return Ok(None);
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                for c in 0..k_cols {
                    x.swap(k * k_cols + c, p * k_cols + c);
                }
            }
            let pivot = a[k * n + k];
            for r in k + 1..n {
                let factor = a[r * n + k] / pivot;
                if factor == Complex64::new(0.0, 0.0) {
                    continue;
                }
                for c in k..n {
                    let v = a[k * n + c];
                    a[r * n + c] -= factor * v;
                }
                for c in 0..k_cols {
                    let xk = x[k * k_cols + c];
                    x[r * k_cols + c] -= factor * xk;
                }
            }
        }
        for k in (0..n).rev() {
            for c in 0..k_cols {
                let mut acc = x[k * k_cols + c];
                for j in k + 1..n {
                    acc -= a[k * n + j] * x[j * k_cols + c];
                }
                x[k * k_cols + c] = acc / a[k * n + k];
            }
        }
        Ok(Some(CMatrix {
            rows: n,
            cols: k_cols,
            data: x,
        }))
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = Complex64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn naive_matmul(a: &CMatrix, b: &CMatrix) -> CMatrix {
        CMatrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut re = 0.0;
            let mut im = 0.0;
            for k in 0..a.cols() {
                let (x, y) = (a[(i, k)], b[(k, j)]);
                re += x.re * y.re - x.im * y.im;
                im += x.re * y.im + x.im * y.re;
            }
            Complex64::new(re, im)
        })
    }

    #[test]
    fn scalar_product() {
        let a = CMatrix::from_vec(1, 1, vec![Complex64::new(1.0, 0.0)]).unwrap();
        let b = CMatrix::from_vec(1, 1, vec![Complex64::new(2.0, 0.0)]).unwrap();
        assert_eq!(a.matmul(&b).unwrap()[(0, 0)], Complex64::new(2.0, 0.0));
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in 1..5 {
            let b = random(3, k, &mut rng);
            assert_eq!(CMatrix::identity(3).matmul(&b).unwrap(), b);
        }
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let a = random(3, 4, &mut rng);
            let b = random(4, 2, &mut rng);
            let got = a.matmul(&b).unwrap();
            assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        }
    }

    #[test]
    fn shape_error_names_both_shapes() {
        let err = CMatrix::zeros(2, 3).matmul(&CMatrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(
            err,
            Error::Shape {
                left: (2, 3),
                right: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn associativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random(3, 4, &mut rng);
            let b = random(4, 5, &mut rng);
            let c = random(5, 2, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let rel = left.max_abs_diff(&right) / left.norm_sqr().sqrt().max(1e-300);
            assert!(rel < 1e-10);
        }
    }

    #[test]
    fn solve_recovers_rhs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = random(4, 4, &mut rng);
            let x: Vec<Complex64> = (0..4)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let xm = CMatrix::from_vec(4, 1, x.clone()).unwrap();
            let b = a.matmul(&xm).unwrap().col(0);
            let got = a.solve(&b, 1e-14).unwrap().unwrap();
            for (g, e) in got.iter().zip(&x) {
                assert!((g - e).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn solve_columns_matches_single_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(3, 3, &mut rng);
        let b = random(3, 2, &mut rng);
        let x = a.solve_columns(&b, 1e-14).unwrap().unwrap();
        for c in 0..2 {
            let single = a.solve(&b.col(c), 1e-14).unwrap().unwrap();
            assert_eq!(x.col(c), single);
        }
    }

    #[test]
    fn solve_reports_singular() {
        let a = CMatrix::from_fn(2, 2, |_, _| Complex64::new(1.0, 0.0));
        assert!(a.solve(&[Complex64::new(1.0, 0.0); 2], 1e-12).unwrap().is_none());
    }
}
