//! Shape manipulation: reshape, permute, narrow and concat.

use crate::tape::Var;
use crate::tensor::{numel, strides_of, Real, Tensor};

fn permute_data<T: Real>(src: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let in_shape = src.shape();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n = out_shape.len();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(&out_shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    let data = src.data();
    // innermost output axis handled as a strided run
    let last = n - 1;
    let run = out_shape[last];
    let run_step = step[last];
    for _ in 0..total / run.max(1) {
        for k in 0..run {
            out.push(data[off + k * run_step]);
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        if in_shape == shape {
            return self;
        }
        let out = (*x).clone().reshape(shape);
        self.tape().custom(&[self], out, move |g| {
            vec![Some(g.clone().reshape(&in_shape))]
        })
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Var<'t, T> {
        let x = self.value();
        assert_eq!(perm.len(), x.ndim(), "permutation rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return self;
        }
        let out = permute_data(&x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.tape().custom(&[self], out, move |g| {
            vec![Some(permute_data(g, &inverse))]
        })
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Var<'t, T> {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        assert!(
            start + len <= in_shape[axis],
            "narrow {start}+{len} exceeds axis {axis} of {in_shape:?}"
        );
        if start == 0 && len == in_shape[axis] {
            return self;
        }
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let n = in_shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        self.tape()
            .custom(&[self], Tensor::new(&out_shape, out), move |g| {
                let mut gx = vec![T::zero(); numel(&in_shape)];
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&in_shape, gx))]
            })
    }

    /// Splits `axis` into consecutive chunks of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Vec<Var<'t, T>> {
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let v = self.narrow(axis, start, s);
                start += s;
                v
            })
            .collect()
    }
}

/// Concatenates variables along `axis`; all other extents must agree.
pub fn concat<'t, T: Real>(vars: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
    assert!(!vars.is_empty(), "concat of nothing");
    if vars.len() == 1 {
        return vars[0];
    }
    let values: Vec<_> = vars.iter().map(|v| v.value()).collect();
    let first = values[0].shape().to_vec();
    for v in &values {
        let s = v.shape();
        assert_eq!(s.len(), first.len(), "concat rank mismatch");
        for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
            assert!(d == axis || a == b, "concat extent mismatch {s:?} vs {first:?}");
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut out_shape = first.clone();
    out_shape[axis] = total;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    drop(values);
    vars[0]
        .tape()
        .custom(vars, Tensor::new(&out_shape, out), move |g| {
            let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
            let gd = g.data();
            let mut off = 0;
            for _ in 0..outer {
                for (p, &l) in parts.iter_mut().zip(&lens) {
                    p.extend_from_slice(&gd[off..off + l * inner]);
                    off += l * inner;
                }
            }
            parts
                .into_iter()
                .zip(&shapes)
                .map(|(p, s)| Some(Tensor::new(s, p)))
                .collect()
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn permute_matches_manual_transpose() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let y = x.permute(&[1, 0]).value();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn permute_3d_roundtrip() {
        let tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::new(&[2, 3, 4], data.clone()));
        let y = x.permute(&[2, 0, 1]);
        assert_eq!(y.shape(), vec![4, 2, 3]);
        assert_eq!(y.value().at(&[3, 1, 2]), x.value().at(&[1, 2, 3]));
        let z = y.permute(&[1, 2, 0]);
        assert_eq!(z.value().data(), &data[..]);
    }

    #[test]
    fn concat_then_narrow_recovers_parts() {
        let tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]));
        let b = tape.variable(Tensor::new(&[1, 1, 2], vec![5., 6.]));
        let c = concat(&[a, b], 1);
        assert_eq!(c.value().data(), &[1., 2., 3., 4., 5., 6.]);
        let tail = c.narrow(1, 2, 1);
        assert_eq!(tail.value().data(), &[5., 6.]);
        let g = tape.backward(tail.sum_all());
        assert_eq!(g.get(a).unwrap().data(), &[0.; 4]);
        assert_eq!(g.get(b).unwrap().data(), &[1., 1.]);
    }
}
