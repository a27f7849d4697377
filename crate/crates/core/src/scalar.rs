//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` on strided row-major views.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are given as
    /// (row stride, column stride) pairs so transposes are free.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Bit pattern used for checksums.
    fn bits(self) -> u64;
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $bits:expr) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n);
                // SAFETY: callers pass buffers whose extents cover the strided
                // views; checked by the debug assertions in `tensor::matmul`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn bits(self) -> u64 {
                $bits(self)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, |x: f32| x.to_bits() as u64);
impl_scalar!(f64, matrixmultiply::dgemm, |x: f64| x.to_bits());
