//! Thin safe layer over `matrixmultiply::dgemm`.

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows × cols` view.
    pub fn rm(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `cols × rows` buffer.
    pub fn rm_t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: 1, cs: rows }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c ← a·b + beta·c`, where `c` is a strided `a.rows × b.cols` destination.
pub(crate) fn gemm_into(a: MatRef, b: MatRef, c: &mut [f64], rsc: usize, csc: usize, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let last = (m - 1) * rsc + (n - 1) * csc;
    assert!(last < c.len(), "gemm destination out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm lies within the bounds asserted
    // above for a, b and c; c does not alias a or b (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Row-major `c[m×n] ← a·b + beta·c`.
pub(crate) fn gemm(a: MatRef, b: MatRef, c: &mut [f64], beta: f64) {
    let n = b.cols;
    gemm_into(a, b, c, n, 1, beta);
}
