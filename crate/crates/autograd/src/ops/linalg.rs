//! Batched matrix products.

use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

fn batch_dims(a: &[usize], b: &[usize]) -> usize {
    assert!(a.len() >= 2 && a.len() == b.len(), "matmul needs equal-rank operands of rank >= 2, got {a:?} and {b:?}");
    assert_eq!(a[..a.len() - 2], b[..b.len() - 2], "matmul batch dims differ: {a:?} vs {b:?}");
    a[..a.len() - 2].iter().product()
}

impl<'t, T: Real> Var<'t, T> {
    /// `[.., m, k] x [.., k, n] -> [.., m, n]` with identical leading dims.
    pub fn matmul(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let batch = batch_dims(&sa, &sb);
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        assert_eq!(sb[r - 2], k, "matmul inner dims differ: {sa:?} x {sb:?}");
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_nn(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = sa.clone();
        out_shape[r - 1] = n;
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.tape()
            .custom(&[self, other], Tensor::new(&out_shape, out), move |g| {
                let gd = g.data();
                let ga = need_a.then(|| {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        // dA = dC * B^T
                        gemm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &b.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Tensor::new(&sa, ga)
                });
                let gb = need_b.then(|| {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for bi in 0..batch {
                        // dB = A^T * dC
                        gemm_tn(
                            &a.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    Tensor::new(&sb, gb)
                });
                vec![ga, gb]
            })
    }

    /// `[.., m, k] x [.., n, k]^T -> [.., m, n]`, avoiding an explicit transpose.
    pub fn matmul_t(self, other: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let batch = batch_dims(&sa, &sb);
        let r = sa.len();
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 2]);
        assert_eq!(sb[r - 1], k, "matmul_t inner dims differ: {sa:?} x {sb:?}^T");
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_nt(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * n * k..(bi + 1) * n * k],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = sa.clone();
        out_shape[r - 1] = n;
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.tape()
            .custom(&[self, other], Tensor::new(&out_shape, out), move |g| {
                let gd = g.data();
                let ga = need_a.then(|| {
                    // dA = dC * B
                    let mut ga = vec![T::zero(); batch * m * k];
                    for bi in 0..batch {
                        gemm_nn(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &b.data()[bi * n * k..(bi + 1) * n * k],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Tensor::new(&sa, ga)
                });
                let gb = need_b.then(|| {
                    // dB = dC^T * A
                    let mut gb = vec![T::zero(); batch * n * k];
                    for bi in 0..batch {
                        gemm_tn(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &a.data()[bi * m * k..(bi + 1) * m * k],
                            &mut gb[bi * n * k..(bi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    Tensor::new(&sb, gb)
                });
                vec![ga, gb]
            })
    }
}
