//! Row-parallel dense matrix products. Each output row is reduced by a single
//! task in a fixed order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_THRESHOLD: usize = 1 << 15;

#[inline]
fn row_kernel<T: Scalar>(crow: &mut [T], arow: &[T], b: &[T], n: usize) {
    for (p, &av) in arow.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// `c += a · b` with `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
pub(crate) fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        let min_rows = (PAR_THRESHOLD / (k * n).max(1)).max(1);
        c.par_chunks_mut(n)
            .zip(a.par_chunks(k.max(1)))
            .with_min_len(min_rows)
            .for_each(|(crow, arow)| row_kernel(crow, arow, b, n));
    } else {
        for (crow, arow) in c.chunks_mut(n).zip(a.chunks(k.max(1))) {
            row_kernel(crow, arow, b, n);
        }
    }
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for col in c0..(c0 + TILE).min(cols) {
                    out[col * rows + r] = a[r * cols + col];
                }
            }
        }
    }
    out
}

/// `aᵀ · b` with `a: [m,k]`, `b: [m,n]`, result `[k,n]`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let at = transpose(a, m, k);
    matmul(&at, b, k, m, n)
}

/// `a · bᵀ` with `a: [m,k]`, `b: [n,k]`, result `[m,n]`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// Column sums of an `[m,n]` matrix.
pub(crate) fn col_sums<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for row in a.chunks(n).take(m) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
