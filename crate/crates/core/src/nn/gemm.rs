//! Row/column-strided matrix products on top of `matrixmultiply`.

use super::Float;

/// `C = alpha * op(A) * op(B) + beta * C` where `A` is `m x k`, `B` is `k x n`
/// and every operand is described by its row and column strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: Float,
    a: &[Float],
    rsa: isize,
    csa: isize,
    b: &[Float],
    rsb: isize,
    csb: isize,
    beta: Float,
    c: &mut [Float],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(extent(m, k, rsa, csa) <= a.len());
    debug_assert!(extent(k, n, rsb, csb) <= b.len());
    debug_assert!(extent(m, n, rsc, csc) <= c.len());
    // SAFETY: the extents checked above bound every index the kernel touches.
    unsafe {
        #[cfg(not(feature = "f64"))]
        matrixmultiply::sgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc,
        );
        #[cfg(feature = "f64")]
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc,
        );
    }
}

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Row-major `C (m x n) = A (m x k) * B (k x n)`, overwriting or accumulating.
pub fn matmul(m: usize, k: usize, n: usize, a: &[Float], b: &[Float], c: &mut [Float], accumulate: bool) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, if accumulate { 1.0 } else { 0.0 }, c, n as isize, 1);
}

/// Row-major `C (m x n) = A^T * B` with `A` stored `k x m`.
pub fn matmul_tn(m: usize, k: usize, n: usize, a: &[Float], b: &[Float], c: &mut [Float], accumulate: bool) {
    gemm(m, k, n, 1.0, a, 1, m as isize, b, n as isize, 1, if accumulate { 1.0 } else { 0.0 }, c, n as isize, 1);
}

/// Row-major `C (m x n) = A * B^T` with `B` stored `n x k`.
pub fn matmul_nt(m: usize, k: usize, n: usize, a: &[Float], b: &[Float], c: &mut [Float], accumulate: bool) {
    gemm(m, k, n, 1.0, a, k as isize, 1, b, 1, k as isize, if accumulate { 1.0 } else { 0.0 }, c, n as isize, 1);
}
