//! Dense loops behind the convolution op. Written so the inner loops run over
//! contiguous slices and auto-vectorize for `f32`.

use crate::Real;

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_before: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    pub fn cols(&self) -> usize {
        self.hout * self.wout
    }
    /// 1×1, stride 1, unpadded: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad_before == 0 && self.hout == self.h && self.wout == self.w
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies
/// inside `0..w`.
#[inline]
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.pad_before as isize;
    let s = g.stride as isize;
    // smallest ox with ox·s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s } as usize;
    // largest ox with ox·s + off <= w − 1, plus one
    let last = g.w as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
    (lo.min(g.wout), hi.min(g.wout).max(lo.min(g.wout)))
}

/// Unfolds one image (`cin×h×w`) into a `(cin·k·k) × (hout·wout)` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad_before as isize;
                    let out = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    if hi > lo {
                        let start = lo * g.stride + kx - g.pad_before;
                        if g.stride == 1 {
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for (o, &v) in out[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                                *o = v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds a column matrix back onto one image, accumulating into `dx`.
pub(crate) fn col2im_acc<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = valid_span(g, kx);
                if hi <= lo {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad_before;
                for oy in 0..g.hout {
                    let iy = (oy * g.stride + ky) as isize - g.pad_before as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.wout + lo..oy * g.wout + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(s) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Largest element index reached by a strided `rows×cols` view, plus one.
fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `c[m×n] += A·B` where `A` is `m×k` with strides `sa` and `B` is `k×n` with
/// strides `sb`; `c` is row-major.
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], sa: (usize, usize), b: &[T], sb: (usize, usize), c: &mut [T], accumulate: bool) {
    assert!(extent(m, k, sa.0, sa.1) <= a.len());
    assert!(extent(k, n, sb.0, sb.1) <= b.len());
    assert!(m * n <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    // SAFETY: every index touched lies inside the slices (asserted above) and
    // `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        T::gemm_acc(
            m,
            k,
            n,
            a.as_ptr(),
            (sa.0 as isize, sa.1 as isize),
            b.as_ptr(),
            (sb.0 as isize, sb.1 as isize),
            if accumulate { T::one() } else { T::zero() },
            c.as_mut_ptr(),
            (n as isize, 1),
        )
    }
}

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    let n = x.len().min(y.len());
    let (x, y) = (&x[..n], &y[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for ch in 0..chunks {
        let xs = &x[ch * 8..ch * 8 + 8];
        let ys = &y[ch * 8..ch * 8 + 8];
        for t in 0..8 {
            acc[t] = acc[t] + xs[t] * ys[t];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..n {
        s = s + x[i] * y[i];
    }
    let a = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let b = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    s + a + b
}

/// `c[m×p] += a[m×k] · b[k×p]`, all row-major.
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    gemm(m, k, p, a, (k, 1), b, (p, 1), c, true);
}

/// `c[k×p] += a[m×k]ᵀ · b[m×p]`.
pub(crate) fn matmul_atb_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    gemm(k, m, p, a, (1, k), b, (p, 1), c, true);
}

/// `c[k×p] = a[m×k]ᵀ · b[m×p]` (overwrites `c`).
pub(crate) fn matmul_atb<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    gemm(k, m, p, a, (1, k), b, (p, 1), c, false);
}

/// `c[m×k] += a[m×p] · b[k×p]ᵀ`.
pub(crate) fn matmul_abt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    gemm(m, p, k, a, (p, 1), b, (1, p), c, true);
}
