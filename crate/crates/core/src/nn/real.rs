use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Numeric precision of a model's parameters and activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Single,
    Double,
}

/// Floating-point element type the engine is generic over (`f32` or `f64`).
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn of_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    /// `c = a · b + beta · c` for row-major `a` (m×k) and `b` (k×n). Either
    /// operand may be read transposed from its stored layout.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        beta: Self,
        c: &mut [Self],
    );
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // Logical (rows × cols) view over a row-major buffer that is either
    // (rows × cols) or, when transposed, (cols × rows).
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn check_gemm_lens(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k, "gemm: lhs has {a} elements, need {}", m * k);
    assert!(b >= k * n, "gemm: rhs has {b} elements, need {}", k * n);
    assert!(c >= m * n, "gemm: out has {c} elements, need {}", m * n);
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn of_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_transposed: bool,
        b: &[f32],
        b_transposed: bool,
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm_lens(m, k, n, a.len(), b.len(), c.len());
        let (rsa, csa) = strides(m, k, a_transposed);
        let (rsb, csb) = strides(k, n, b_transposed);
        // SAFETY: lengths checked above; strides describe in-bounds views.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn of_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_transposed: bool,
        b: &[f64],
        b_transposed: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm_lens(m, k, n, a.len(), b.len(), c.len());
        let (rsa, csa) = strides(m, k, a_transposed);
        let (rsb, csb) = strides(k, n, b_transposed);
        // SAFETY: lengths checked above; strides describe in-bounds views.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
