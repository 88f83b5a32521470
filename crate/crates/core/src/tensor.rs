//! Row-major 2-D tensors and the handful of dense kernels the denoiser needs.
//!
//! Every kernel accumulates in a fixed order that does not depend on the number of
//! rows, so a row's result is bit-identical whether it is computed alone or in a batch.

use crate::scalar::{gemm, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_sq(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::of(v.to_f64_lossy())).collect(),
        }
    }
}

/// `a (n x k) * b (k x m)`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Tensor::zeros(a.rows, b.cols);
    gemm(a.rows, a.cols, b.cols, &a.data, a.cols as isize, 1, &b.data, b.cols as isize, 1, &mut out.data);
    out
}

/// `g (n x m) * b^T` where `b` is `k x m`; yields `n x k`.
pub fn matmul_bt<S: Scalar>(g: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(g.cols, b.cols, "matmul_bt inner dimension");
    let mut out = Tensor::zeros(g.rows, b.rows);
    gemm(g.rows, g.cols, b.rows, &g.data, g.cols as isize, 1, &b.data, 1, b.cols as isize, &mut out.data);
    out
}

/// `a^T * g` where `a` is `n x k` and `g` is `n x m`; yields `k x m`.
pub fn matmul_at<S: Scalar>(a: &Tensor<S>, g: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.rows, g.rows, "matmul_at outer dimension");
    let mut out = Tensor::zeros(a.cols, g.cols);
    gemm(a.cols, a.rows, g.cols, &a.data, 1, a.cols as isize, &g.data, g.cols as isize, 1, &mut out.data);
    out
}

/// Column sums, i.e. the gradient of a broadcast row bias.
pub fn col_sums<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let mut out = Tensor::zeros(1, g.cols);
    for i in 0..g.rows {
        for (o, &v) in out.data.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, v.to_vec())
    }

    #[test]
    fn products_agree_with_definition() {
        let a = t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(matmul(&a, &b).data, vec![58.0, 64.0, 139.0, 154.0]);
        let g = t(2, 2, &[1.0, 0.5, -1.0, 2.0]);
        // g * b^T
        assert_eq!(matmul_bt(&g, &b).data, vec![11.0, 14.0, 17.0, 9.0, 11.0, 13.0]);
        // a^T * g
        assert_eq!(matmul_at(&a, &g).data, vec![-3.0, 8.5, -3.0, 11.0, -3.0, 13.5]);
        assert_eq!(col_sums(&a).data, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let a = t(3, 2, &[0.1, 0.7, -0.3, 0.2, 1.1, -0.9]);
        let b = t(2, 2, &[0.3, 0.9, -0.4, 0.6]);
        let full = matmul(&a, &b);
        for r in 0..3 {
            let single = matmul(&t(1, 2, a.row(r)), &b);
            assert_eq!(single.data, full.row(r));
        }
    }
}
