use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of a [`Tape`](crate::Tape).
///
/// Training runs in `f32`; gradient checks instantiate the same code with `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// `c := alpha * a·b + beta * c` for an `m×k` by `k×n` product, with
    /// explicit row and column strides for every operand.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

fn check_operands<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &(&[T], isize, isize),
    b: &(&[T], isize, isize),
    c: &(&mut [T], isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(max_offset(m, k, a.1, a.2) < a.0.len(), "gemm: lhs out of bounds");
        assert!(max_offset(k, n, b.1, b.2) < b.0.len(), "gemm: rhs out of bounds");
    }
    assert!(max_offset(m, n, c.1, c.2) < c.0.len(), "gemm: output out of bounds");
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: (&[f32], isize, isize),
        b: (&[f32], isize, isize),
        beta: f32,
        c: (&mut [f32], isize, isize),
    ) {
        check_operands(m, k, n, &a, &b, &c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every addressed element was bounds-checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: (&[f64], isize, isize),
        b: (&[f64], isize, isize),
        beta: f64,
        c: (&mut [f64], isize, isize),
    ) {
        check_operands(m, k, n, &a, &b, &c);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: every addressed element was bounds-checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                beta,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect();
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, 1.0, (&a, 3, 1), (&b, 4, 1), 0.0, (&mut c, 4, 1));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn gemm_rejects_short_buffers() {
        let a = vec![0.0f32; 5];
        let b = vec![0.0f32; 12];
        let mut c = vec![0.0f32; 8];
        f32::gemm(2, 3, 4, 1.0, (&a, 3, 1), (&b, 4, 1), 0.0, (&mut c, 4, 1));
    }
}
