use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type of a [`crate::Tensor`].
///
/// `f64` is used for gradient checks, `f32` for training throughput.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Smallest probability the loss guards clamp to. `1 - PROB_EPS` must be
    /// representable and distinct from one.
    const PROB_EPS: f64;

    /// `c = alpha * a · b + beta * c` over strided row/column views.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`. Slice bounds are checked
    /// before handing the pointers to the kernel.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

fn check_bounds(m: usize, k: usize, n: usize, la: usize, sa: (usize, usize), lb: usize, sb: (usize, usize), lc: usize, sc: (usize, usize)) {
    assert!(span(m, k, sa) <= la, "gemm: lhs view out of bounds");
    assert!(span(k, n, sb) <= lb, "gemm: rhs view out of bounds");
    assert!(span(m, n, sc) <= lc, "gemm: output view out of bounds");
}

macro_rules! impl_scalar {
    ($t:ty, $eps:expr, $kernel:path) => {
        impl Scalar for $t {
            const PROB_EPS: f64 = $eps;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_bounds(m, k, n, a.len(), a_strides, b.len(), b_strides, c.len(), c_strides);
                // SAFETY: every strided view was checked to lie inside its slice.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, 1e-6, matrixmultiply::sgemm);
impl_scalar!(f64, 1e-12, matrixmultiply::dgemm);
