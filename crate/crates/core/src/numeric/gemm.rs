//! Strided matrix product backed by `matrixmultiply::dgemm`.

/// Borrowed matrix with explicit row and column strides.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

impl<'a> MatView<'a> {
    pub(crate) fn new(data: &'a [f64], rs: usize, cs: usize) -> Self {
        Self {
            data,
            rs: rs as isize,
            cs: cs as isize,
        }
    }
}

/// `c[m,n] = a[m,k] · b[k,n] + beta · c`, with `c` row-major contiguous.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatView<'_>, b: MatView<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(c.len(), m * n, "gemm output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let span = |v: &MatView<'_>, r: usize, cc: usize| (r - 1) as isize * v.rs + (cc - 1) as isize * v.cs;
    assert!(span(&a, m, k) < a.data.len() as isize, "gemm lhs view out of bounds");
    assert!(span(&b, k, n) < b.data.len() as isize, "gemm rhs view out of bounds");
    // SAFETY: both views were bounds-checked above; `c` has m*n elements and
    // is addressed with row stride n, column stride 1.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
