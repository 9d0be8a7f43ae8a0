//! Raw matrix kernels shared by the forward ops, the backward rules and the
//! adapter merge. Everything here works on plain slices; shape checking is
//! the caller's job.
//!
//! The accumulating i-k-j loop is the single hot path of the whole crate.
//! It keeps the inner loop elementwise over contiguous rows so the compiler
//! can vectorize it; transposed operand layouts are handled by materializing
//! the transpose once, which is cheap next to the multiply itself.

use crate::scalar::Scalar;

/// `out[m x n] += a[m x k] . b[k x n]`, all row-major.
pub(crate) fn matmul_acc<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Row-major transpose: `src` is `rows x cols`, result is `cols x rows`.
pub(crate) fn transpose<F: Scalar>(rows: usize, cols: usize, src: &[F]) -> Vec<F> {
    debug_assert_eq!(src.len(), rows * cols);
    let mut dst = vec![F::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}

/// `a[m x k] . b[k x n]` into a fresh buffer.
pub(crate) fn matmul<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F]) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul_acc(m, k, n, a, b, &mut out);
    out
}

/// `a[m x k] . b[n x k]^T` into a fresh buffer.
pub(crate) fn matmul_nt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F]) -> Vec<F> {
    let bt = transpose(n, k, b);
    matmul(m, k, n, a, &bt)
}
