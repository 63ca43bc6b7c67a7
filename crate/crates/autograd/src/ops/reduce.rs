//! Reductions and softmax.

use std::rc::Rc;

use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t, T: Real> Var<'t, T> {
    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape().custom(&[self], out, move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean_all(self) -> Var<'t, T> {
        let n = self.value().numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sum along `axis`; with `keepdim` the axis is kept with length 1.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'t, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let (outer, n, inner) = split_axis(&in_shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let src = x.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = in_shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        self.tape()
            .custom(&[self], Tensor::new(&out_shape, out), move |g| {
                let mut gx = vec![T::zero(); outer * n * inner];
                let gd = g.data();
                for o in 0..outer {
                    let grow = &gd[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        gx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(grow);
                    }
                }
                vec![Some(Tensor::new(&in_shape, gx))]
            })
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'t, T> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n)
    }

    /// Mean over several axes, all kept with length 1.
    pub fn mean_axes_keepdim(self, axes: &[usize]) -> Var<'t, T> {
        axes.iter().fold(self, |v, &a| v.mean_axis(a, true))
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = *shape.last().expect("softmax of a scalar");
        let mut y = x.data().to_vec();
        for row in y.chunks_exact_mut(n) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let inv = s.recip();
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let y = Rc::new(Tensor::new(&shape, y));
        let yk = y.clone();
        self.tape().custom_rc(&[self], y, move |g| {
            let mut gx = vec![T::zero(); g.numel()];
            for ((gr, yr), out) in g
                .data()
                .chunks_exact(n)
                .zip(yk.data().chunks_exact(n))
                .zip(gx.chunks_exact_mut(n))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::new(&shape, gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn sum_axis_values() {
        let tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        assert_eq!(x.sum_axis(0, false).value().data(), &[5., 7., 9.]);
        assert_eq!(x.sum_axis(1, true).value().shape(), &[2, 1]);
        assert_eq!(x.sum_axis(1, true).value().data(), &[6., 15.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1., 2., 3., -1., 0., 1000.]));
        let y = x.softmax_last().value();
        for row in y.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
