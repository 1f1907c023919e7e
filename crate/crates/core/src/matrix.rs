//! Dense square matrices in row-major order and the small amount of linear
//! algebra the solvers need.

use crate::error::{Error, Result};

/// A dense, row-major, square `f64` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Matrix {
            n,
            data: vec![value; n * n],
        }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                actual: data.len(),
            });
        }
        Ok(Matrix { n, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            let r = r.as_ref();
            if r.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { n, data })
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.n;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let n = self.n;
        let mut t = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                t.data[j * n + i] = self.data[i * n + j];
            }
        }
        t
    }

    /// Row vector times matrix: `out[j] = Σ_i v[i] M[i][j]`.
    pub fn left_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.left_mul_into(v, &mut out);
        out
    }

    pub fn left_mul_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n);
        out.iter_mut().for_each(|x| *x = 0.0);
        for (vi, row) in v.iter().zip(self.rows()) {
            if *vi == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(row) {
                *o += vi * m;
            }
        }
    }

    /// Dense product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                actual: other.n,
            });
        }
        let n = self.n;
        let mut out = Matrix::zeros(n);
        if n == 0 {
            return Ok(out);
        }
        // SAFETY: all three buffers are n*n, row-major with row stride n and
        // column stride 1, and `out` does not alias the inputs.
        unsafe {
            matrixmultiply::dgemm(
                n,
                n,
                n,
                1.0,
                self.data.as_ptr(),
                n as isize,
                1,
                other.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// Compensated summation.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in it {
        let y = x - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// LU factorization with partial pivoting, stored in place.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
    sign: f64,
    min_pivot: f64,
    max_pivot: f64,
}

impl Lu {
    pub fn factor(mut a: Matrix) -> Lu {
        let n = a.n;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        let mut min_pivot = f64::INFINITY;
        let mut max_pivot = 0.0_f64;
        for k in 0..n {
            let mut p = k;
            let mut best = a[(k, k)].abs();
            for i in k + 1..n {
                let v = a[(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if p != k {
                for j in 0..n {
                    a.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = a[(k, k)];
            min_pivot = min_pivot.min(pivot.abs());
            max_pivot = max_pivot.max(pivot.abs());
            if pivot == 0.0 {
                continue;
            }
            let (upper, lower) = a.data.split_at_mut((k + 1) * n);
            let krow = &upper[k * n..(k + 1) * n];
            for row in lower.chunks_exact_mut(n) {
                let f = row[k] / pivot;
                row[k] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        row[j] -= f * krow[j];
                    }
                }
            }
        }
        Lu {
            lu: a,
            perm,
            sign,
            min_pivot,
            max_pivot,
        }
    }

    /// Ratio of the largest to the smallest pivot magnitude.
    pub fn pivot_ratio(&self) -> f64 {
        if self.min_pivot == 0.0 {
            f64::INFINITY
        } else {
            self.max_pivot / self.min_pivot
        }
    }

    pub fn is_singular(&self, rtol: f64) -> bool {
        self.min_pivot <= rtol * self.max_pivot
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let s: f64 = (0..i).map(|j| row[j] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let s: f64 = (i + 1..n).map(|j| row[j] * x[j]).sum();
            x[i] = (x[i] - s) / row[i];
        }
        x
    }

    /// `(sign, ln|det|)`; sign is 0 for a singular matrix.
    pub fn log_det(&self) -> (f64, f64) {
        let mut sign = self.sign;
        let mut log = 0.0;
        for i in 0..self.lu.n {
            let d = self.lu[(i, i)];
            if d == 0.0 {
                return (0.0, f64::NEG_INFINITY);
            }
            if d < 0.0 {
                sign = -sign;
            }
            log += d.abs().ln();
        }
        (sign, log)
    }
}
