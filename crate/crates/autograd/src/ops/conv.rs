//! 2-D convolution over NCHW tensors with grouped channels.
//!
//! Groups with several input channels are lowered to im2col plus a matrix
//! product per image and group. Depthwise convolutions (one input channel per
//! group) use direct loops over (channel, kernel tap) that sweep whole rows,
//! which avoids building a column matrix for a single-row product.

use crate::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Stride, zero padding and channel grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    /// Zero padding added on (top/bottom, left/right).
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding: (padding, padding),
            groups: 1,
        }
    }

    /// "Same" padding for an odd square kernel at unit stride.
    pub fn same(kernel: usize) -> Self {
        Self::new(1, kernel / 2)
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cpg_in: usize,
    cpg_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    s: usize,
    ph: usize,
    pw: usize,
    groups: usize,
}

impl Geometry {
    fn new(x: &[usize], wt: &[usize], spec: Conv2dSpec) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW, got {x:?}");
        assert_eq!(wt.len(), 4, "conv2d weight must be [out, in/groups, kh, kw], got {wt:?}");
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cpg_in, kh, kw) = (wt[0], wt[1], wt[2], wt[3]);
        let g = spec.groups;
        assert!(g >= 1 && cin % g == 0 && cout % g == 0, "bad groups {g} for {cin}->{cout}");
        assert_eq!(cin / g, cpg_in, "weight {wt:?} does not match {cin} input channels / {g} groups");
        assert!(spec.stride >= 1);
        let (ph, pw) = spec.padding;
        assert!(h + 2 * ph >= kh && w + 2 * pw >= kw, "kernel larger than padded input");
        let oh = (h + 2 * ph - kh) / spec.stride + 1;
        let ow = (w + 2 * pw - kw) / spec.stride + 1;
        Self {
            n,
            cin,
            h,
            w,
            cout,
            cpg_in,
            cpg_out: cout / g,
            kh,
            kw,
            oh,
            ow,
            s: spec.stride,
            ph,
            pw,
            groups: g,
        }
    }

    /// Output column range `[lo, hi)` whose input column `ox*s + kx - pw` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if kx >= self.pw {
            0
        } else {
            (self.pw - kx).div_ceil(self.s)
        };
        // need ox*s + kx < w + pw
        let lim = self.w + self.pw;
        let hi = if lim > kx { (lim - kx).div_ceil(self.s) } else { 0 };
        (lo, hi.min(self.ow))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy * self.s + ky;
        (iy >= self.ph && iy - self.ph < self.h).then(|| iy - self.ph)
    }

    /// Rows of the column matrix: one per (input channel, tap) of a group.
    fn col_rows(&self) -> usize {
        self.cpg_in * self.kh * self.kw
    }

    fn col_len(&self) -> usize {
        self.oh * self.ow
    }

    /// A 1x1, unit-stride, unpadded convolution reads its input directly
    /// as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.s == 1 && self.ph == 0 && self.pw == 0
    }

    fn use_gemm(&self) -> bool {
        self.cpg_in > 1 || self.cpg_out > 1 && self.groups == 1
    }

    /// Fills `cols` (`[cpg_in * kh * kw, oh * ow]`) from one group of one image.
    fn im2col<T: Real>(&self, x_group: &[T], cols: &mut [T]) {
        cols.fill(T::zero());
        let p = self.col_len();
        for cil in 0..self.cpg_in {
            let plane = &x_group[cil * self.h * self.w..(cil + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (cil * self.kh + ky) * self.kw + kx;
                    let row = &mut cols[r * p..(r + 1) * p];
                    let (lo, hi) = self.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        let dst = &mut row[oy * self.ow + lo..oy * self.ow + hi];
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        if self.s == 1 {
                            let ix0 = lo + kx - self.pw;
                            dst.copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (d, ox) in dst.iter_mut().zip(lo..hi) {
                                *d = src[ox * self.s + kx - self.pw];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto one group of one image.
    fn col2im<T: Real>(&self, cols: &[T], gx_group: &mut [T]) {
        let p = self.col_len();
        for cil in 0..self.cpg_in {
            let plane = &mut gx_group[cil * self.h * self.w..(cil + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (cil * self.kh + ky) * self.kw + kx;
                    let row = &cols[r * p..(r + 1) * p];
                    let (lo, hi) = self.col_range(kx);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..self.oh {
                        let Some(iy) = self.in_row(oy, ky) else { continue };
                        let src = &row[oy * self.ow + lo..oy * self.ow + hi];
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        if self.s == 1 {
                            let ix0 = lo + kx - self.pw;
                            for (d, &v) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (&v, ox) in src.iter().zip(lo..hi) {
                                dst[ox * self.s + kx - self.pw] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Calls `f(x_group_offset, y_group_offset, w_group_offset)` for every
    /// (image, group).
    fn for_each_group(&self, mut f: impl FnMut(usize, usize, usize)) {
        for b in 0..self.n {
            for g in 0..self.groups {
                let x_off = (b * self.cin + g * self.cpg_in) * self.h * self.w;
                let y_off = (b * self.cout + g * self.cpg_out) * self.col_len();
                let w_off = g * self.cpg_out * self.col_rows();
                f(x_off, y_off, w_off);
            }
        }
    }

    /// Visits every (image, output channel, input channel, tap) with the
    /// corresponding plane offsets.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for b in 0..self.n {
            for g in 0..self.groups {
                for col in 0..self.cpg_out {
                    let co = g * self.cpg_out + col;
                    for cil in 0..self.cpg_in {
                        let ci = g * self.cpg_in + cil;
                        let x_off = (b * self.cin + ci) * self.h * self.w;
                        let y_off = (b * self.cout + co) * self.oh * self.ow;
                        let w_off = (co * self.cpg_in + cil) * self.kh * self.kw;
                        f(b, co, x_off, y_off, w_off);
                    }
                }
            }
        }
    }
}

fn forward<T: Real>(geo: &Geometry, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut y = vec![T::zero(); geo.n * geo.cout * geo.oh * geo.ow];
    if let Some(bias) = bias {
        for (plane, idx) in y.chunks_exact_mut(geo.oh * geo.ow).zip(0..) {
            plane.fill(bias[idx % geo.cout]);
        }
    }
    if geo.use_gemm() {
        let (k, p, m) = (geo.col_rows(), geo.col_len(), geo.cpg_out);
        let xg_len = geo.cpg_in * geo.h * geo.w;
        let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { k * p }];
        geo.for_each_group(|x_off, y_off, w_off| {
            let xg = &x[x_off..x_off + xg_len];
            let b: &[T] = if geo.is_pointwise() {
                xg
            } else {
                geo.im2col(xg, &mut cols);
                &cols
            };
            gemm_nn(&wt[w_off..w_off + m * k], b, &mut y[y_off..y_off + m * p], m, k, p);
        });
        return y;
    }
    geo.for_each_tap(|_, _, x_off, y_off, w_off| {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let wv = wt[w_off + ky * geo.kw + kx];
                if wv == T::zero() {
                    continue;
                }
                let (lo, hi) = geo.col_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..geo.oh {
                    let Some(iy) = geo.in_row(oy, ky) else { continue };
                    let yrow = &mut y[y_off + oy * geo.ow..y_off + (oy + 1) * geo.ow];
                    let xrow = &x[x_off + iy * geo.w..x_off + (iy + 1) * geo.w];
                    if geo.s == 1 {
                        let ix0 = lo + kx - geo.pw;
                        axpy(wv, &xrow[ix0..ix0 + (hi - lo)], &mut yrow[lo..hi]);
                    } else {
                        for ox in lo..hi {
                            yrow[ox] += wv * xrow[ox * geo.s + kx - geo.pw];
                        }
                    }
                }
            }
        }
    });
    y
}

fn backward_input<T: Real>(geo: &Geometry, gy: &[T], wt: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); geo.n * geo.cin * geo.h * geo.w];
    if geo.use_gemm() {
        let (k, p, m) = (geo.col_rows(), geo.col_len(), geo.cpg_out);
        let xg_len = geo.cpg_in * geo.h * geo.w;
        let mut cols = vec![T::zero(); k * p];
        geo.for_each_group(|x_off, y_off, w_off| {
            let gxg = &mut gx[x_off..x_off + xg_len];
            let (wg, gyg) = (&wt[w_off..w_off + m * k], &gy[y_off..y_off + m * p]);
            if geo.is_pointwise() {
                gemm_tn(wg, gyg, gxg, k, m, p);
            } else {
                cols.fill(T::zero());
                gemm_tn(wg, gyg, &mut cols, k, m, p);
                geo.col2im(&cols, gxg);
            }
        });
        return gx;
    }
    geo.for_each_tap(|_, _, x_off, y_off, w_off| {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let wv = wt[w_off + ky * geo.kw + kx];
                if wv == T::zero() {
                    continue;
                }
                let (lo, hi) = geo.col_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..geo.oh {
                    let Some(iy) = geo.in_row(oy, ky) else { continue };
                    let grow = &gy[y_off + oy * geo.ow..y_off + (oy + 1) * geo.ow];
                    let xrow = &mut gx[x_off + iy * geo.w..x_off + (iy + 1) * geo.w];
                    if geo.s == 1 {
                        let ix0 = lo + kx - geo.pw;
                        axpy(wv, &grow[lo..hi], &mut xrow[ix0..ix0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            xrow[ox * geo.s + kx - geo.pw] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    });
    gx
}

fn backward_weight<T: Real>(geo: &Geometry, gy: &[T], x: &[T]) -> Vec<T> {
    let mut gw = vec![T::zero(); geo.cout * geo.cpg_in * geo.kh * geo.kw];
    if geo.use_gemm() {
        let (k, p, m) = (geo.col_rows(), geo.col_len(), geo.cpg_out);
        let xg_len = geo.cpg_in * geo.h * geo.w;
        let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { k * p }];
        geo.for_each_group(|x_off, y_off, w_off| {
            let xg = &x[x_off..x_off + xg_len];
            let b: &[T] = if geo.is_pointwise() {
                xg
            } else {
                geo.im2col(xg, &mut cols);
                &cols
            };
            gemm_nt(&gy[y_off..y_off + m * p], b, &mut gw[w_off..w_off + m * k], m, p, k);
        });
        return gw;
    }
    let mut strided = Vec::new();
    geo.for_each_tap(|_, _, x_off, y_off, w_off| {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let (lo, hi) = geo.col_range(kx);
                if lo >= hi {
                    continue;
                }
                let mut acc = T::zero();
                for oy in 0..geo.oh {
                    let Some(iy) = geo.in_row(oy, ky) else { continue };
                    let grow = &gy[y_off + oy * geo.ow..y_off + (oy + 1) * geo.ow];
                    let xrow = &x[x_off + iy * geo.w..x_off + (iy + 1) * geo.w];
                    if geo.s == 1 {
                        let ix0 = lo + kx - geo.pw;
                        acc += dot(&grow[lo..hi], &xrow[ix0..ix0 + (hi - lo)]);
                    } else {
                        strided.clear();
                        strided.extend((lo..hi).map(|ox| xrow[ox * geo.s + kx - geo.pw]));
                        acc += dot(&grow[lo..hi], &strided);
                    }
                }
                gw[w_off + ky * geo.kw + kx] += acc;
            }
        }
    });
    gw
}

fn backward_bias<T: Real>(geo: &Geometry, gy: &[T]) -> Vec<T> {
    let mut gb = vec![T::zero(); geo.cout];
    for (plane, idx) in gy.chunks_exact(geo.oh * geo.ow).zip(0..) {
        gb[idx % geo.cout] += plane.iter().copied().sum::<T>();
    }
    gb
}

impl<'t, T: Real> Var<'t, T> {
    /// Cross-correlation of an NCHW input with `[out, in/groups, kh, kw]`
    /// weights and an optional `[out]` bias.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, spec: Conv2dSpec) -> Var<'t, T> {
        let (x, wt) = (self.value(), weight.value());
        let geo = Geometry::new(x.shape(), wt.shape(), spec);
        let bias_val = bias.map(|b| {
            let v = b.value();
            assert_eq!(v.shape(), &[geo.cout], "conv2d bias must be [{}]", geo.cout);
            v
        });
        let y = forward(&geo, x.data(), wt.data(), bias_val.as_ref().map(|b| b.data()));
        let out = Tensor::new(&[geo.n, geo.cout, geo.oh, geo.ow], y);
        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        let need_b = bias.map(|b| b.requires_grad()).unwrap_or(false);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        let (xs, ws) = (x.shape().to_vec(), wt.shape().to_vec());
        self.tape().custom(&parents, out, move |g| {
            let gx = need_x.then(|| Tensor::new(&xs, backward_input(&geo, g.data(), wt.data())));
            let gw = need_w.then(|| Tensor::new(&ws, backward_weight(&geo, g.data(), x.data())));
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(need_b.then(|| Tensor::new(&[geo.cout], backward_bias(&geo, g.data()))));
            }
            grads
        })
    }
}
