//! Inner loops shared by the heavier operations.
//!
//! Reductions use a fixed eight-lane accumulation order, so results do not
//! depend on how the compiler vectorizes them.

use crate::tensor::Real;

/// `y += a * x` over the common length.
#[inline(always)]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product over the common length.
#[inline(always)]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

/// `c[m,n] += a[m,k] * b[k,n]`.
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (k, 1), b, (n, 1), c, (n, 1));
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (k, 1), b, (1, k), c, (n, 1));
}

/// `c[m,n] += a[k,m]^T * b[k,n]`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, (1, m), b, (n, 1), c, (n, 1));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 11, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        let mut c2 = vec![0.0; m * n];
        gemm_nt(&a, &transpose(&b, k, n), &mut c2, m, k, n);
        let mut c3 = vec![0.0; m * n];
        gemm_tn(&transpose(&a, m, k), &b, &mut c3, m, k, n);
        for i in 0..m * n {
            assert!((c[i] - want[i]).abs() < 1e-12);
            assert!((c2[i] - want[i]).abs() < 1e-12);
            assert!((c3[i] - want[i]).abs() < 1e-12);
        }
    }
}
