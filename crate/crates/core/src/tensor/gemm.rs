/// Row-major strided view of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols }
    }
}

/// `c (m x n, row-major) += a (m x k) * b (k x n)`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
    assert!(b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    // SAFETY: the asserts above bound every index dgemm touches.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
