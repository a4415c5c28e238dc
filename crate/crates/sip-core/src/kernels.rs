//! Shared numeric kernels.
//!
//! The tape ops and the scaling benchmarks call the same code, so benchmark
//! timings measure exactly what the model executes. Every inner reduction
//! runs left-to-right; row-level parallelism (behind the `parallel`
//! feature) never reorders a sum.

use crate::par;
use crate::real::Real;

/// Row-block height for cache-blocked matmul.
const BLOCK_ROWS: usize = 32;
/// Inner-dimension block for cache-blocked matmul.
const BLOCK_K: usize = 64;

/// out += a @ b with a: [m,k], b: [k,n]. `out` must be zeroed by the caller.
///
/// Blocked over rows and the inner dimension for cache reuse; the k-sum
/// for every output element still runs strictly left-to-right (blocks in
/// order, in-block in order), so results are independent of blocking and
/// thread count.
pub fn matmul<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_block(out, BLOCK_ROWS * n, |block_idx, block| {
        let i0 = block_idx * BLOCK_ROWS;
        let rows = block.len() / n;
        let mut kb = 0;
        while kb < k {
            let kb_end = (kb + BLOCK_K).min(k);
            for bi in 0..rows {
                let arow = &a[(i0 + bi) * k..(i0 + bi) * k + k];
                let row = &mut block[bi * n..(bi + 1) * n];
                for kk in kb..kb_end {
                    let aik = arow[kk];
                    let brow = &b[kk * n..kk * n + n];
                    for (r, &bv) in row.iter_mut().zip(brow) {
                        *r += aik * bv;
                    }
                }
            }
            kb = kb_end;
        }
    });
}

/// out = a @ b^T with a: [m,k], b: [n,k]. Runs as a transpose plus the
/// blocked [`matmul`]; per-element accumulation order is identical.
pub fn matmul_nt<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let mut bt = vec![R::ZERO; k * n];
    transpose(b, n, k, &mut bt);
    matmul(a, &bt, m, k, n, out);
}

/// out = src^T with src: [rows, cols], out: [cols, rows].
pub fn transpose<R: Real>(src: &[R], rows: usize, cols: usize, out: &mut [R]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    // Tile to keep both access patterns cache-resident.
    const TILE: usize = 32;
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + TILE).min(rows);
        let mut c0 = 0;
        while c0 < cols {
            let c1 = (c0 + TILE).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
            c0 = c1;
        }
        r0 = r1;
    }
}

/// out = a^T @ b with a: [k,m], b: [k,n]. Used by backward rules.
pub fn matmul_tn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::for_each_row(out, n, |i, row| {
        for kk in 0..k {
            let aki = a[kk * m + i];
            let brow = &b[kk * n..kk * n + n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += aki * bv;
            }
        }
    });
}

/// Numerically stable softmax over one row.
pub fn softmax_in_place<R: Real>(row: &mut [R]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = R::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Exact (erf-based) GELU.
pub fn gelu<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let inv_sqrt2 = R::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * x * (R::ONE + (x * inv_sqrt2).erf())
}

/// d/dx of the exact GELU: Phi(x) + x * phi(x).
pub fn gelu_derivative<R: Real>(x: R) -> R {
    let half = R::from_f64(0.5);
    let inv_sqrt2 = R::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = R::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let cdf = half * (R::ONE + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}
