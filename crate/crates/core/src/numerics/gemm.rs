//! Strided `c = a·b + beta·c` with the blocked kernels of `matrixmultiply`
//! for `f32`/`f64` and a plain loop otherwise.

use std::any::TypeId;

use crate::scalar::Scalar;

/// Row and column strides of a matrix view.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }
}

/// `c[n×m] = a[n×k]·b[k×m] + (accumulate ? c : 0)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    n: usize,
    k: usize,
    m: usize,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    c: &mut [T],
    lc: Layout,
    accumulate: bool,
) {
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    let st = |l: Layout| (l.rs as isize, l.cs as isize);
    let ((rsa, csa), (rsb, csb), (rsc, csc)) = (st(la), st(lb), st(lc));
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the TypeId check makes the pointer casts identity casts, and
    // every view lies inside its slice given the layouts the callers pass.
    unsafe {
        if TypeId::of::<T>() == TypeId::of::<f64>() {
            matrixmultiply::dgemm(
                n,
                k,
                m,
                1.0,
                a.as_ptr() as *const f64,
                rsa,
                csa,
                b.as_ptr() as *const f64,
                rsb,
                csb,
                beta,
                c.as_mut_ptr() as *mut f64,
                rsc,
                csc,
            );
            return;
        }
        if TypeId::of::<T>() == TypeId::of::<f32>() {
            matrixmultiply::sgemm(
                n,
                k,
                m,
                1.0,
                a.as_ptr() as *const f32,
                rsa,
                csa,
                b.as_ptr() as *const f32,
                rsb,
                csb,
                beta as f32,
                c.as_mut_ptr() as *mut f32,
                rsc,
                csc,
            );
            return;
        }
    }
    for i in 0..n {
        for j in 0..m {
            let mut s = T::zero();
            for p in 0..k {
                s += a[i * la.rs + p * la.cs] * b[p * lb.rs + j * lb.cs];
            }
            let o = &mut c[i * lc.rs + j * lc.cs];
            *o = if accumulate { *o + s } else { s };
        }
    }
}
