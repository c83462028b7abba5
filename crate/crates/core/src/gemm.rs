//! Small dense matrix kernels.
//!
//! `gemm_acc` sums each output element strictly in `k` order, so a direct
//! convolution lowered through im2col reproduces the textbook nested-loop
//! result bit-for-bit.

use crate::tensor::Real;

const COL_BLOCK: usize = 256;

const MR: usize = 4;
const NR: usize = 8;

/// `c[m,n] += a[m,k] · b[k,n]`, each `c[i,j]` accumulated in increasing `k`.
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut panel = Vec::new();
    let mut n0 = 0;
    while n0 < n {
        let nb = COL_BLOCK.min(n - n0);
        let full = nb / NR;
        // pack the block's full NR-wide column strips contiguously along k
        panel.clear();
        panel.reserve(full * k * NR);
        for p in 0..full {
            let j = n0 + p * NR;
            for t in 0..k {
                panel.extend_from_slice(&b[t * n + j..t * n + j + NR]);
            }
        }
        let mut i = 0;
        while i + MR <= m {
            for p in 0..full {
                micro_tile(i, n0 + p * NR, k, n, a, &panel[p * k * NR..(p + 1) * k * NR], c);
            }
            for r in i..i + MR {
                edge_row(r, n0 + full * NR, n0 + nb, k, n, a, b, c);
            }
            i += MR;
        }
        for r in i..m {
            edge_row(r, n0, n0 + nb, k, n, a, b, c);
        }
        n0 += nb;
    }
}

/// `MR × NR` block of `c` kept in registers across the whole `k` loop;
/// `strip` holds the matching `k × NR` columns of `b`, row after row.
#[inline(always)]
fn micro_tile<T: Real>(i: usize, j: usize, k: usize, n: usize, a: &[T], strip: &[T], c: &mut [T]) {
    let mut acc = [[T::zero(); NR]; MR];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
    }
    let arows: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    for (t, bv) in strip.chunks_exact(NR).enumerate() {
        for r in 0..MR {
            let w = arows[r][t];
            for l in 0..NR {
                acc[r][l] += w * bv[l];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

/// Row `r`, columns `j0..j1` without tiling.
#[allow(clippy::too_many_arguments)]
fn edge_row<T: Real>(r: usize, j0: usize, j1: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    if j0 >= j1 {
        return;
    }
    let crow = &mut c[r * n + j0..r * n + j1];
    for t in 0..k {
        let w = a[r * k + t];
        let brow = &b[t * n + j0..t * n + j1];
        crow.iter_mut().zip(brow).for_each(|(c, &x)| *c += w * x);
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`.
pub fn gemm_nt_acc<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            c[i * k + j] += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`, overwriting `c`. Sums run in increasing `m`
/// exactly as if `c` had been zeroed and accumulated.
pub fn gemm_tn<T: Real>(k: usize, m: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if m == 0 {
        c.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    for (j, crow) in c.chunks_exact_mut(n).enumerate() {
        let w = a[j];
        crow.iter_mut().zip(&b[..n]).for_each(|(c, &x)| *c = w * x);
    }
    if m > 1 {
        let rest = m - 1;
        let mut at = vec![T::zero(); k * rest];
        for i in 1..m {
            for j in 0..k {
                at[j * rest + i - 1] = a[i * k + j];
            }
        }
        gemm_acc(k, rest, n, &at, &b[n..], c);
    }
}

/// Dot product with eight independent partial sums.
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let (xs, ys) = (&x[c * 8..c * 8 + 8], &y[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut s = T::zero();
    for i in chunks * 8..x.len() {
        s += x[i] * y[i];
    }
    acc.iter().fold(s, |a, &b| a + b)
}
