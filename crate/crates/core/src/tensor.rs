//! Dense row-major tensors.
//!
//! Every numeric routine in the crate works on two-dimensional tensors
//! (`[rows, cols]`); higher ranks exist only so that checkpoints can carry
//! arbitrary shapes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: vec![n],
                found: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, S::zero())
    }

    pub fn full(rows: usize, cols: usize, value: S) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Builds a `[rows, cols]` tensor; panics when `data.len() != rows * cols`.
    pub fn from_rows(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major payload length");
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// A single-row tensor.
    pub fn row(data: Vec<S>) -> Self {
        let n = data.len();
        Self::from_rows(1, n, data)
    }

    /// A single-column tensor.
    pub fn column(data: Vec<S>) -> Self {
        let n = data.len();
        Self::from_rows(n, 1, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, mut f: impl FnMut(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, mut f: impl FnMut(S, S) -> S) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: vec![S::zero(); self.data.len()],
        }
    }

    pub fn add_assign_tensor(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sum_squares(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> S {
        self.sum_squares().sqrt()
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::from_rows(c, r, out)
    }

    /// `self · rhs` for `[n, k] · [k, m]`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (n, k) = (self.rows(), self.cols());
        let (k2, m) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                context: "matmul",
                expected: vec![k, m],
                found: vec![k2, m],
            });
        }
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * m..(i + 1) * m];
            for (p, &a) in a_row.iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let b_row = &rhs.data[p * m..(p + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_rows(n, m, out))
    }

    /// `selfᵀ · rhs` for `[k, n]ᵀ · [k, m]`, without materialising the transpose.
    pub fn matmul_tn(&self, rhs: &Self) -> Self {
        let (k, n) = (self.rows(), self.cols());
        let m = rhs.cols();
        debug_assert_eq!(k, rhs.rows());
        let mut out = vec![S::zero(); n * m];
        for p in 0..k {
            let a_row = &self.data[p * n..(p + 1) * n];
            let b_row = &rhs.data[p * m..(p + 1) * m];
            for (i, &a) in a_row.iter().enumerate() {
                if a == S::zero() {
                    continue;
                }
                let o_row = &mut out[i * m..(i + 1) * m];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::from_rows(n, m, out)
    }

    /// `self · rhsᵀ` for `[n, k] · [m, k]ᵀ`.
    pub fn matmul_nt(&self, rhs: &Self) -> Self {
        let (n, k) = (self.rows(), self.cols());
        let m = rhs.rows();
        debug_assert_eq!(k, rhs.cols());
        let mut out = vec![S::zero(); n * m];
        for i in 0..n {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                out[i * m + j] = a_row.iter().zip(b_row).map(|(&a, &b)| a * b).sum();
            }
        }
        Self::from_rows(n, m, out)
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts
            .first()
            .map(|p| p.rows())
            .ok_or_else(|| Error::invalid("concat_cols of zero tensors"))?;
        if let Some(bad) = parts.iter().find(|p| p.rows() != rows) {
            return Err(Error::ShapeMismatch {
                context: "concat_cols",
                expected: vec![rows],
                found: vec![bad.rows()],
            });
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(p.row_slice(r));
            }
        }
        Ok(Self::from_rows(rows, total, out))
    }

    /// Columns `[start, start + len)` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let c = self.cols();
        assert!(start + len <= c && len > 0, "column slice out of range");
        let mut out = Vec::with_capacity(self.rows() * len);
        for r in 0..self.rows() {
            out.extend_from_slice(&self.row_slice(r)[start..start + len]);
        }
        Self::from_rows(self.rows(), len, out)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let c = self.cols();
        assert!(start + len <= self.rows() && len > 0, "row slice out of range");
        Self::from_rows(len, c, self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn convert<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::cast(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_rows(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(a.transpose().matmul_tn(&b), ab);
        assert_eq!(a.matmul_nt(&b.transpose()), ab);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = Tensor::from_rows(2, 1, vec![1.0, 2.0]);
        let b = Tensor::from_rows(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = Tensor::concat_cols(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice_cols(1, 2), b);
        assert_eq!(c.slice_cols(0, 1), a);
    }
}
