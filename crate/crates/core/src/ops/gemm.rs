//! Small dense matrix kernels behind the convolutions.

use crate::tensor::{DType, Real};

const MR: usize = 4;

/// `c = A · B` where `A(i, p) = a[i * ars + p * acs]` is `m x k`, `b` is
/// row-major `k x n` and `c` is row-major `m x n`.
///
/// Every element of `c` is accumulated from zero over `p = 0, 1, .., k-1`
/// in that order, so results equal a naive triple loop bit for bit. The
/// wide variant only changes register blocking, never the arithmetic.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Real>(m: usize, n: usize, k: usize, a: &[T], ars: usize, acs: usize, b: &[T], c: &mut [T]) {
    assert!(b.len() >= k * n && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { matmul_avx2(m, n, k, a, ars, acs, b, c) };
        return;
    }
    match T::DTYPE {
        DType::F64 => blocked::<T, 4>(m, n, k, a, ars, acs, b, c),
        DType::F32 => blocked::<T, 8>(m, n, k, a, ars, acs, b, c),
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn matmul_avx2<T: Real>(m: usize, n: usize, k: usize, a: &[T], ars: usize, acs: usize, b: &[T], c: &mut [T]) {
    match T::DTYPE {
        DType::F64 => blocked::<T, 8>(m, n, k, a, ars, acs, b, c),
        DType::F32 => blocked::<T, 16>(m, n, k, a, ars, acs, b, c),
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn blocked<T: Real, const NR: usize>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    ars: usize,
    acs: usize,
    b: &[T],
    c: &mut [T],
) {
    let mut panel = vec![T::zero(); k * NR];
    let mut j = 0;
    while j + NR <= n {
        for p in 0..k {
            panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j..p * n + j + NR]);
        }
        let mut i = 0;
        while i + MR <= m {
            let mut acc = [[T::zero(); NR]; MR];
            for (p, brow) in panel.chunks_exact(NR).enumerate() {
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + r) * ars + p * acs];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
            }
            i += MR;
        }
        for r in i..m {
            let mut acc = [T::zero(); NR];
            for (p, brow) in panel.chunks_exact(NR).enumerate() {
                let av = a[r * ars + p * acs];
                for (o, &bv) in acc.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
            c[r * n + j..r * n + j + NR].copy_from_slice(&acc);
        }
        j += NR;
    }
    for r in 0..m {
        naive_row(r, j, n, k, a, ars, acs, b, c);
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn naive_row<T: Real>(r: usize, j0: usize, n: usize, k: usize, a: &[T], ars: usize, acs: usize, b: &[T], c: &mut [T]) {
    for j in j0..n {
        let mut acc = T::zero();
        for p in 0..k {
            acc += a[r * ars + p * acs] * b[p * n + j];
        }
        c[r * n + j] = acc;
    }
}

/// `c += A · Bᵀ` with `a` row-major `m x k`, `b` row-major `n x k` and
/// `c` row-major `m x n`. Computed as `(B · Aᵀ)ᵀ`, which only transposes
/// `a`; callers should pass the operand with fewer rows as `a`.
pub fn matmul_nt_acc<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut at = vec![T::zero(); k * m];
    for (i, row) in a.chunks_exact(k).take(m).enumerate() {
        for (p, &v) in row.iter().enumerate() {
            at[p * m + i] = v;
        }
    }
    let mut prod = vec![T::zero(); n * m];
    matmul(n, m, k, b, k, 1, &at, &mut prod);
    for (j, row) in prod.chunks_exact(m).enumerate() {
        for (i, &v) in row.iter().enumerate() {
            c[i * n + j] += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_equals_triple_loop_bit_for_bit() {
        for (m, n, k) in [(1, 1, 1), (4, 8, 3), (5, 9, 7), (9, 17, 30), (3, 20, 2)] {
            let a: Vec<f64> = (0..m * k).map(|v| ((v * 37 % 101) as f64 - 50.0) / 7.3).collect();
            let b: Vec<f64> = (0..k * n).map(|v| ((v * 53 % 97) as f64 - 48.0) / 3.1).collect();
            let mut c = vec![0.0; m * n];
            matmul(m, n, k, &a, k, 1, &b, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[i * k + p] * b[p * n + j];
                    }
                    assert_eq!(c[i * n + j], acc);
                }
            }
            // Transposed view of the same storage.
            let mut ct = vec![0.0; k * n.min(m)];
            let nn = n.min(m);
            let bb: Vec<f64> = b[..m * nn].to_vec();
            matmul(k, nn, m, &a, 1, k, &bb, &mut ct);
            for i in 0..k {
                for j in 0..nn {
                    let mut acc = 0.0;
                    for p in 0..m {
                        acc += a[p * k + i] * bb[p * nn + j];
                    }
                    assert_eq!(ct[i * nn + j], acc);
                }
            }
        }
    }

    #[test]
    fn nt_accumulates() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut c = [10.0, 0.0, 0.0, 0.0];
        matmul_nt_acc(2, 2, 3, &a, &b, &mut c);
        assert_eq!(c, [14.0, 2.0, 10.0, 5.0]);
    }
}
