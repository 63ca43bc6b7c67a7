//! Pooling, resampling, padding and normalization over NCHW tensors.

use std::rc::Rc;

use crate::tape::Var;
use crate::tensor::{Real, Tensor};

fn nchw(shape: &[usize], what: &str) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "{what} expects an NCHW tensor, got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

/// Normalizes groups of `len` values spaced `stride` apart, starting at each
/// offset from `starts`. Returns the normalized values and the inverse
/// standard deviation of each group.
fn normalize_groups<T: Real>(
    x: &[T],
    starts: impl Iterator<Item = usize>,
    len: usize,
    stride: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = Vec::new();
    let inv_n = T::lit(1.0 / len as f64);
    for s in starts {
        let mut mean = T::zero();
        for i in 0..len {
            mean += x[s + i * stride];
        }
        mean *= inv_n;
        let mut var = T::zero();
        for i in 0..len {
            let d = x[s + i * stride] - mean;
            var += d * d;
        }
        var *= inv_n;
        let r = (var + T::lit(eps)).sqrt().recip();
        for i in 0..len {
            y[s + i * stride] = (x[s + i * stride] - mean) * r;
        }
        inv_std.push(r);
    }
    (y, inv_std)
}

/// Backward of [`normalize_groups`]:
/// `dx = r * (g - mean(g) - y * mean(g * y))` per group.
fn normalize_groups_backward<T: Real>(
    g: &[T],
    y: &[T],
    inv_std: &[T],
    starts: impl Iterator<Item = usize>,
    len: usize,
    stride: usize,
) -> Vec<T> {
    let mut gx = vec![T::zero(); g.len()];
    let inv_n = T::lit(1.0 / len as f64);
    for (s, &r) in starts.zip(inv_std) {
        let mut mg = T::zero();
        let mut mgy = T::zero();
        for i in 0..len {
            let k = s + i * stride;
            mg += g[k];
            mgy += g[k] * y[k];
        }
        mg *= inv_n;
        mgy *= inv_n;
        for i in 0..len {
            let k = s + i * stride;
            gx[k] = r * (g[k] - mg - y[k] * mgy);
        }
    }
    gx
}

impl<'t, T: Real> Var<'t, T> {
    /// Non-overlapping average pooling with a square window of size `k`.
    /// Trailing rows or columns that do not fill a window are dropped.
    pub fn avg_pool2d(self, k: usize) -> Var<'t, T> {
        assert!(k >= 1);
        if k == 1 {
            return self;
        }
        let x = self.value();
        let (n, c, h, w) = nchw(x.shape(), "avg_pool2d");
        let (oh, ow) = (h / k, w / k);
        assert!(oh > 0 && ow > 0, "avg_pool2d window {k} larger than {h}x{w}");
        let inv = T::lit(1.0 / (k * k) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for oy in 0..oh {
                for dy in 0..k {
                    let row = &src[(oy * k + dy) * w..];
                    for ox in 0..ow {
                        let mut s = T::zero();
                        for dx in 0..k {
                            s += row[ox * k + dx];
                        }
                        dst[oy * ow + ox] += s * inv;
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.tape()
            .custom(&[self], Tensor::new(&[n, c, oh, ow], out), move |g| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for dy in 0..k {
                            let row = &mut dst[(oy * k + dy) * w..];
                            for ox in 0..ow {
                                let v = gp[oy * ow + ox] * inv;
                                for dx in 0..k {
                                    row[ox * k + dx] = v;
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&in_shape, gx))]
            })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest2d(self, factor: usize) -> Var<'t, T> {
        assert!(factor >= 1);
        if factor == 1 {
            return self;
        }
        let x = self.value();
        let (n, c, h, w) = nchw(x.shape(), "upsample_nearest2d");
        let (oh, ow) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    out.push(row[ox / factor]);
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.tape()
            .custom(&[self], Tensor::new(&[n, c, oh, ow], out), move |g| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[(oy / factor) * w + ox / factor] += gp[oy * ow + ox];
                        }
                    }
                }
                vec![Some(Tensor::new(&in_shape, gx))]
            })
    }

    /// Pads the spatial dims by `pad` on every side, repeating edge values.
    pub fn pad_replicate(self, pad: usize) -> Var<'t, T> {
        if pad == 0 {
            return self;
        }
        let x = self.value();
        let (n, c, h, w) = nchw(x.shape(), "pad_replicate");
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let src_index = move |oy: usize, ox: usize| {
            let iy = oy.saturating_sub(pad).min(h - 1);
            let ix = ox.saturating_sub(pad).min(w - 1);
            iy * w + ix
        };
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    out.push(src[src_index(oy, ox)]);
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.tape()
            .custom(&[self], Tensor::new(&[n, c, oh, ow], out), move |g| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for p in 0..n * c {
                    let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[src_index(oy, ox)] += gp[oy * ow + ox];
                        }
                    }
                }
                vec![Some(Tensor::new(&in_shape, gx))]
            })
    }

    /// Instance normalization without affine parameters: each (image,
    /// channel) plane is shifted to zero mean and scaled to unit variance.
    pub fn instance_norm(self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = nchw(x.shape(), "instance_norm");
        let hw = h * w;
        let (y, inv_std) = normalize_groups(x.data(), (0..n * c).map(|p| p * hw), hw, 1, eps);
        let y = Rc::new(Tensor::new(x.shape(), y));
        let yk = y.clone();
        self.tape().custom_rc(&[self], y, move |g| {
            let gx = normalize_groups_backward(
                g.data(),
                yk.data(),
                &inv_std,
                (0..n * c).map(|p| p * hw),
                hw,
                1,
            );
            vec![Some(Tensor::new(yk.shape(), gx))]
        })
    }

    /// Normalizes across channels independently at every pixel, without
    /// affine parameters.
    pub fn channel_norm(self, eps: f64) -> Var<'t, T> {
        let x = self.value();
        let (n, c, h, w) = nchw(x.shape(), "channel_norm");
        let hw = h * w;
        let starts = move || (0..n).flat_map(move |b| (0..hw).map(move |i| b * c * hw + i));
        let (y, inv_std) = normalize_groups(x.data(), starts(), c, hw, eps);
        let y = Rc::new(Tensor::new(x.shape(), y));
        let yk = y.clone();
        self.tape().custom_rc(&[self], y, move |g| {
            let gx = normalize_groups_backward(g.data(), yk.data(), &inv_std, starts(), c, hw);
            vec![Some(Tensor::new(yk.shape(), gx))]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor};

    #[test]
    fn pool_then_upsample_shapes() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f64).collect()));
        let p = x.avg_pool2d(2).value();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        let u = x.avg_pool2d(2).upsample_nearest2d(2).value();
        assert_eq!(u.shape(), &[1, 1, 4, 4]);
        assert_eq!(u.at(&[0, 0, 1, 1]), 2.5);
        assert_eq!(u.at(&[0, 0, 3, 2]), 12.5);
    }

    #[test]
    fn replicate_padding_copies_edges() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]));
        let y = x.pad_replicate(1).value();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn instance_norm_gives_zero_mean_unit_variance() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 2, 3, 3], (0..18).map(|v| (v * v) as f64).collect()));
        let y = x.instance_norm(0.0).value();
        for plane in y.data().chunks(9) {
            let m: f64 = plane.iter().sum::<f64>() / 9.0;
            let v: f64 = plane.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 9.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_norm_normalizes_each_pixel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2, 3, 1, 2], (0..12).map(|v| (v as f64).sin()).collect()));
        let y = x.channel_norm(0.0).value();
        for b in 0..2 {
            for i in 0..2 {
                let vals: Vec<f64> = (0..3).map(|c| y.at(&[b, c, 0, i])).collect();
                let m = vals.iter().sum::<f64>() / 3.0;
                assert!(m.abs() < 1e-12);
            }
        }
    }
}
