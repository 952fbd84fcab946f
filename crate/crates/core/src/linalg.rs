//! Small fixed-size dense matrices.
//!
//! The filters only ever need 2x2 and 4x4 state matrices with 2-dimensional
//! observations, so a const-generic array matrix covers everything and keeps
//! the numeric code generic over [`Scalar`].

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matrix<T, const R: usize, const C: usize> {
    data: [[T; C]; R],
}

pub type Vector<T, const N: usize> = Matrix<T, N, 1>;
pub type Mat2<T> = Matrix<T, 2, 2>;
pub type Vec2<T> = Vector<T, 2>;

impl<T: Scalar, const R: usize, const C: usize> Matrix<T, R, C> {
    pub fn from_rows(data: [[T; C]; R]) -> Self {
        Self { data }
    }

    pub fn zeros() -> Self {
        Self {
            data: [[T::zero(); C]; R],
        }
    }

    pub fn rows(&self) -> &[[T; C]; R] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix<T, C, R> {
        let mut out = Matrix::<T, C, R>::zeros();
        for i in 0..R {
            for j in 0..C {
                out.data[j][i] = self.data[i][j];
            }
        }
        out
    }

    pub fn scale(&self, k: T) -> Self {
        let mut out = *self;
        for row in out.data.iter_mut() {
            for v in row.iter_mut() {
                *v *= k;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let mut out = *self;
        for row in out.data.iter_mut() {
            for v in row.iter_mut() {
                *v = f(*v);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut m = T::zero();
        for i in 0..R {
            for j in 0..C {
                m = m.max((self.data[i][j] - other.data[i][j]).abs());
            }
        }
        m
    }
}

impl<T: Scalar, const N: usize> Matrix<T, N, N> {
    pub fn identity() -> Self {
        let mut out = Self::zeros();
        for i in 0..N {
            out.data[i][i] = T::one();
        }
        out
    }

    pub fn diagonal(d: [T; N]) -> Self {
        let mut out = Self::zeros();
        for i in 0..N {
            out.data[i][i] = d[i];
        }
        out
    }

    pub fn trace(&self) -> T {
        (0..N).map(|i| self.data[i][i]).sum()
    }

    /// Averages the matrix with its transpose.
    pub fn symmetrize(&self) -> Self {
        let t = self.transpose();
        let half = T::lit(0.5);
        let mut out = *self;
        for i in 0..N {
            for j in 0..N {
                out.data[i][j] = (self.data[i][j] + t.data[i][j]) * half;
            }
        }
        out
    }

    pub fn asymmetry(&self) -> T {
        self.max_abs_diff(&self.transpose())
    }

    /// Quadratic form `vᵀ M v`.
    pub fn quad_form(&self, v: &Vector<T, N>) -> T {
        let mut acc = T::zero();
        for i in 0..N {
            for j in 0..N {
                acc += v.data[i][0] * self.data[i][j] * v.data[j][0];
            }
        }
        acc
    }
}

impl<T: Scalar, const N: usize> Vector<T, N> {
    pub fn from_array(v: [T; N]) -> Self {
        let mut out = Self::zeros();
        for (i, x) in v.into_iter().enumerate() {
            out.data[i][0] = x;
        }
        out
    }

    pub fn to_array(&self) -> [T; N] {
        let mut out = [T::zero(); N];
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.data[i][0];
        }
        out
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|r| r[0] * r[0]).sum::<T>().sqrt()
    }
}

impl<T: Scalar> Mat2<T> {
    pub fn determinant(&self) -> T {
        let [[a, b], [c, d]] = self.data;
        a * d - b * c
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.determinant();
        if det == T::zero() || !det.is_finite() {
            return None;
        }
        let [[a, b], [c, d]] = self.data;
        Some(Self::from_rows([[d / det, -b / det], [-c / det, a / det]]))
    }

    /// Eigenvalues of a symmetric 2x2 matrix, ascending.
    pub fn symmetric_eigenvalues(&self) -> [T; 2] {
        let [[a, b], [_, d]] = self.data;
        let half = T::lit(0.5);
        let mean = (a + d) * half;
        let r = (((a - d) * half).powi(2) + b * b).sqrt();
        [mean - r, mean + r]
    }
}

impl<T, const R: usize, const C: usize> Index<(usize, usize)> for Matrix<T, R, C> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i][j]
    }
}

impl<T, const R: usize, const C: usize> IndexMut<(usize, usize)> for Matrix<T, R, C> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i][j]
    }
}

impl<T: Scalar, const N: usize> Index<usize> for Vector<T, N> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.data[i][0]
    }
}

impl<T: Scalar, const N: usize> IndexMut<usize> for Vector<T, N> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.data[i][0]
    }
}

impl<T: Scalar, const R: usize, const C: usize> Add for Matrix<T, R, C> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        for i in 0..R {
            for j in 0..C {
                self.data[i][j] += rhs.data[i][j];
            }
        }
        self
    }
}

impl<T: Scalar, const R: usize, const C: usize> Sub for Matrix<T, R, C> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        for i in 0..R {
            for j in 0..C {
                self.data[i][j] -= rhs.data[i][j];
            }
        }
        self
    }
}

impl<T: Scalar, const R: usize, const C: usize> Neg for Matrix<T, R, C> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(|v| -v)
    }
}

impl<T: Scalar, const R: usize, const K: usize, const C: usize> Mul<Matrix<T, K, C>>
    for Matrix<T, R, K>
{
    type Output = Matrix<T, R, C>;
    fn mul(self, rhs: Matrix<T, K, C>) -> Matrix<T, R, C> {
        let mut out = Matrix::<T, R, C>::zeros();
        for i in 0..R {
            for j in 0..C {
                let mut acc = T::zero();
                for k in 0..K {
                    acc += self.data[i][k] * rhs.data[k][j];
                }
                out.data[i][j] = acc;
            }
        }
        out
    }
}
