//! Pointwise unary and binary operations with numpy-style broadcasting.

use std::rc::Rc;

use crate::tape::Var;
use crate::tensor::{numel, strides_of, Real, Tensor};

/// Shape obtained by broadcasting `a` against `b`, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// A broadcast from `in_shape` to an output shape, reduced to as few axes as
/// possible: each entry is (output extent, stride in the input buffer), with
/// stride 0 on broadcast axes. Adjacent axes that walk the input
/// contiguously, or that are both broadcast, are merged.
fn broadcast_plan(in_shape: &[usize], out_shape: &[usize]) -> Vec<(usize, usize)> {
    let n = out_shape.len();
    let pad = n - in_shape.len();
    let in_strides = strides_of(in_shape);
    let mut plan: Vec<(usize, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let size = out_shape[i];
        if size == 1 {
            continue;
        }
        let stride = if i < pad || in_shape[i - pad] == 1 {
            0
        } else {
            in_strides[i - pad]
        };
        if let Some(last) = plan.last_mut() {
            if last.1 == stride * size {
                // contiguous continuation (or both broadcast, where 0 == 0)
                *last = (last.0 * size, stride);
                continue;
            }
        }
        plan.push((size, stride));
    }
    if plan.is_empty() {
        plan.push((1, 0));
    }
    plan
}

/// Visits the output in order as runs of the innermost plan axis, passing
/// the input offset at the start of each run.
fn for_each_run(plan: &[(usize, usize)], mut f: impl FnMut(usize, usize)) {
    let (outer, inner) = plan.split_at(plan.len() - 1);
    let run = inner[0].0;
    let count: usize = outer.iter().map(|p| p.0).product();
    let mut idx = vec![0usize; outer.len()];
    let mut off = 0usize;
    for r in 0..count {
        f(r * run, off);
        for ax in (0..outer.len()).rev() {
            idx[ax] += 1;
            off += outer[ax].1;
            if idx[ax] < outer[ax].0 {
                break;
            }
            off -= outer[ax].1 * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn broadcast_gather<T: Real>(x: &[T], in_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    let plan = broadcast_plan(in_shape, out_shape);
    let (run, stride) = *plan.last().unwrap();
    let mut out = vec![T::zero(); numel(out_shape)];
    for_each_run(&plan, |o, i| {
        let dst = &mut out[o..o + run];
        if stride == 0 {
            dst.fill(x[i]);
        } else {
            dst.copy_from_slice(&x[i..i + run]);
        }
    });
    out
}

fn broadcast_reduce<T: Real>(g: &[T], in_shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    let plan = broadcast_plan(in_shape, out_shape);
    let (run, stride) = *plan.last().unwrap();
    let mut acc = vec![T::zero(); numel(in_shape)];
    for_each_run(&plan, |o, i| {
        let src = &g[o..o + run];
        if stride == 0 {
            acc[i] += src.iter().copied().sum::<T>();
        } else {
            for (a, &v) in acc[i..i + run].iter_mut().zip(src) {
                *a += v;
            }
        }
    });
    acc
}

// Graph ops are methods rather than operator impls so that call chains read
// left to right and every op records onto the same tape.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    /// Elementwise map with derivative `df(x, y)` expressed through the input
    /// `x` and output `y`.
    pub fn unary_op(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = Rc::new(x.map(&f));
        let y_keep = y.clone();
        self.tape().custom_rc(&[self], y, move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y_keep.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary_op(|x| -x, |_, _| -T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary_op(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary_op(|x| x.ln(), |x, _| x.recip())
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary_op(|x| x.tanh_fast(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary_op(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary_op(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    /// `min(max(x, 0), 6)`, as used in inverted bottleneck blocks.
    pub fn relu6(self) -> Var<'t, T> {
        self.clamp(0.0, 6.0)
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let s = T::lit(slope);
        self.unary_op(
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    /// Tanh approximation of the Gaussian error linear unit, evaluated as
    /// `x * sigmoid(2u)` with `u = c (x + k x^3)`, which equals
    /// `0.5 x (1 + tanh u)` exactly.
    pub fn gelu(self) -> Var<'t, T> {
        let c2 = T::lit(2.0 * (2.0 / std::f64::consts::PI).sqrt());
        let k = T::lit(0.044715);
        let k3 = T::lit(3.0 * 0.044715);
        let sig = move |x: T| T::one() / (T::one() + (-(c2 * (x + k * x * x * x))).exp());
        self.unary_op(
            move |x| x * sig(x),
            move |x, _| {
                let s = sig(x);
                s + x * s * (T::one() - s) * c2 * (T::one() + k3 * x * x)
            },
        )
    }

    pub fn softplus(self) -> Var<'t, T> {
        self.unary_op(
            |x| {
                if x > T::lit(20.0) {
                    x
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary_op(|x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    /// Absolute value; the derivative at zero is taken as zero.
    pub fn abs(self) -> Var<'t, T> {
        self.unary_op(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary_op(|x| x * x, |x, _| x + x)
    }

    pub fn powf(self, p: f64) -> Var<'t, T> {
        let p = T::lit(p);
        self.unary_op(move |x| x.powf(p), move |x, _| p * x.powf(p - T::one()))
    }

    /// Clamp into `[lo, hi]`; the gradient is passed only strictly inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        self.unary_op(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn add_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::lit(s);
        self.unary_op(move |x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(self, s: f64) -> Var<'t, T> {
        let s = T::lit(s);
        self.unary_op(move |x| x * s, move |_, _| s)
    }

    /// Broadcasts to `shape` (numpy rules); the gradient sums over copies.
    pub fn broadcast_to(self, shape: &[usize]) -> Var<'t, T> {
        let in_shape = self.shape();
        if in_shape == shape {
            return self;
        }
        assert_eq!(
            broadcast_shape(&in_shape, shape).as_deref(),
            Some(shape),
            "cannot broadcast {in_shape:?} to {shape:?}"
        );
        let x = self.value();
        let out = Tensor::new(shape, broadcast_gather(x.data(), &in_shape, shape));
        let out_shape = shape.to_vec();
        self.tape().custom(&[self], out, move |g| {
            let acc = broadcast_reduce(g.data(), &in_shape, &out_shape);
            vec![Some(Tensor::new(&in_shape, acc))]
        })
    }

    fn broadcast_pair(self, other: Var<'t, T>) -> (Var<'t, T>, Var<'t, T>) {
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            return (self, other);
        }
        let shape = broadcast_shape(&sa, &sb)
            .unwrap_or_else(|| panic!("shapes {sa:?} and {sb:?} do not broadcast"));
        (self.broadcast_to(&shape), other.broadcast_to(&shape))
    }

    fn binary_op(
        self,
        other: Var<'t, T>,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let (a, b) = self.broadcast_pair(other);
        let (av, bv) = (a.value(), b.value());
        let out = Rc::new(av.zip_map(&bv, &f));
        let out_rc = out.clone();
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        a.tape().custom_rc(&[a, b], out, move |g| {
            let grad = |d: &dyn Fn(T, T, T) -> T| {
                let data = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()).zip(out_rc.data()))
                    .map(|(&gv, ((&x, &y), &o))| gv * d(x, y, o))
                    .collect();
                Tensor::new(g.shape(), data)
            };
            vec![need_a.then(|| grad(&da)), need_b.then(|| grad(&db))]
        })
    }

    /// Sum or difference; the gradient is passed through (negated for `b`
    /// when `sign` is -1) without touching the operands.
    fn linear_op(self, other: Var<'t, T>, sign: T) -> Var<'t, T> {
        let (a, b) = self.broadcast_pair(other);
        let out = a.value().zip_map(&b.value(), |x, y| x + sign * y);
        let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
        a.tape().custom(&[a, b], out, move |g| {
            vec![
                need_a.then(|| g.clone()),
                need_b.then(|| if sign == T::one() { g.clone() } else { g.map(|v| -v) }),
            ]
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Var<'t, T> {
        self.linear_op(other, T::one())
    }

    pub fn sub(self, other: Var<'t, T>) -> Var<'t, T> {
        self.linear_op(other, -T::one())
    }

    pub fn mul(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary_op(other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary_op(
            other,
            |a, b| a / b,
            |_, b, _| b.recip(),
            |_, b, y| -y / b,
        )
    }

    /// Elementwise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary_op(
            other,
            |a, b| if b > a { b } else { a },
            |a, b, _| if b > a { T::zero() } else { T::one() },
            |a, b, _| if b > a { T::one() } else { T::zero() },
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'t, T>) -> Var<'t, T> {
        self.binary_op(
            other,
            |a, b| if b < a { b } else { a },
            |a, b, _| if b < a { T::zero() } else { T::one() },
            |a, b, _| if b < a { T::one() } else { T::zero() },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn broadcast_shape_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[1], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }

    #[test]
    fn broadcast_add_and_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = tape.variable(Tensor::new(&[3], vec![10., 20., 30.]));
        let c = a.add(b);
        assert_eq!(c.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let g = tape.backward(c.sum_all());
        assert_eq!(g.get(b).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(g.get(a).unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn middle_axis_broadcast() {
        let tape = Tape::<f64>::new();
        let a = tape.variable(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]));
        let c = a.broadcast_to(&[2, 3, 2]);
        assert_eq!(
            c.value().data(),
            &[1., 2., 1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]
        );
        let g = tape.backward(c.sum_all());
        assert_eq!(g.get(a).unwrap().data(), &[3.; 4]);
    }
}
