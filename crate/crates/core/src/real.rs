use core::fmt::Debug;
use num_traits::Float;

/// Floating-point element type of the tensor graph.
///
/// Training runs in `f32`; gradient checking re-executes the same graph in `f64`.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a·b + beta·c` on strided row/column views. Callers guarantee the
    /// strides stay inside the slices (checked by [`crate::autodiff`]).
    #[doc(hidden)]
    unsafe fn gemm_acc(m: usize, k: usize, n: usize, a: *const Self, sa: (isize, isize), b: *const Self, sb: (isize, isize), beta: Self, c: *mut Self, sc: (isize, isize));
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    unsafe fn gemm_acc(m: usize, k: usize, n: usize, a: *const Self, sa: (isize, isize), b: *const Self, sb: (isize, isize), beta: Self, c: *mut Self, sc: (isize, isize)) {
        unsafe { matrixmultiply::sgemm(m, k, n, 1.0, a, sa.0, sa.1, b, sb.0, sb.1, beta, c, sc.0, sc.1) }
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    unsafe fn gemm_acc(m: usize, k: usize, n: usize, a: *const Self, sa: (isize, isize), b: *const Self, sb: (isize, isize), beta: Self, c: *mut Self, sc: (isize, isize)) {
        unsafe { matrixmultiply::dgemm(m, k, n, 1.0, a, sa.0, sa.1, b, sb.0, sb.1, beta, c, sc.0, sc.1) }
    }
}
