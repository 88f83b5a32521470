use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of network parameters and activations.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or statistic.
    fn of(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// `c = a * b` for strided row/column layouts; see [`gemm`].
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, c: &mut [Self]);
}

/// Overwrites the row-major `m x n` buffer `c` with `a * b`.
///
/// `a` is `m x k` and `b` is `k x n`, each described by row and column strides, so
/// transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], rsa: isize, csa: isize, b: &[S], rsb: isize, csb: isize, c: &mut [S]) {
    assert_eq!(c.len(), m * n, "gemm output size");
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa), "gemm lhs too short");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm rhs too short");
    S::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, c);
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    fn gemm_raw(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, c: &mut [Self]) {
        // SAFETY: `gemm` checked that every strided access stays inside the slices.
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
        }
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn to_f64_lossy(self) -> f64 {
        self
    }

    fn gemm_raw(m: usize, k: usize, n: usize, a: &[Self], rsa: isize, csa: isize, b: &[Self], rsb: isize, csb: isize, c: &mut [Self]) {
        // SAFETY: `gemm` checked that every strided access stays inside the slices.
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
        }
    }
}
