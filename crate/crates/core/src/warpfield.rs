//! Dense displacement fields, differentiable bilinear resampling, field
//! algebra, the smoothness penalty and Sobel gradient magnitudes.
//!
//! Displacements are in pixels of the target grid and act additively:
//! `warp(img, phi)(x) = img(x + phi(x))`, sampled bilinearly with
//! clamp-to-edge. In graph form a field is an `[N, 2, H, W]` tensor holding
//! the horizontal component in channel 0 and the vertical one in channel 1.

use std::fs;
use std::path::Path;

use fusekit_autograd::{Conv2dSpec, Real, Tensor, Var};

use crate::error::{FuseError, Result};
use crate::imagedata::{decode_header_grid, resize_taps, Augment, Image};

const F32D_MAGIC: &[u8; 4] = b"F32D";

/// Per-pixel displacement `(dx, dy)` in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl DeformationField {
    pub fn new(height: usize, width: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(FuseError::Invalid("empty deformation field".into()));
        }
        if dx.len() != height * width || dy.len() != height * width {
            return Err(FuseError::Shape(format!(
                "field planes of {} and {} values for {height}x{width}",
                dx.len(),
                dy.len()
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(FuseError::Invalid("deformation field has non-finite entries".into()));
        }
        Ok(Self { height, width, dx, dy })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dx(&self) -> &[f32] {
        &self.dx
    }

    pub fn dy(&self) -> &[f32] {
        &self.dy
    }

    /// Largest displacement norm.
    pub fn max_norm(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(&a, &b)| (a as f64).hypot(b as f64))
            .fold(0.0, f64::max)
    }

    /// Mean Euclidean distance to another field.
    pub fn mean_distance(&self, other: &DeformationField) -> Result<f64> {
        self.check_shape(other.height, other.width)?;
        let n = self.dx.len() as f64;
        Ok(self
            .dx
            .iter()
            .zip(&self.dy)
            .zip(other.dx.iter().zip(&other.dy))
            .map(|((&a, &b), (&c, &d))| ((a - c) as f64).hypot((b - d) as f64))
            .sum::<f64>()
            / n)
    }

    fn check_shape(&self, h: usize, w: usize) -> Result<()> {
        if self.height == h && self.width == w {
            Ok(())
        } else {
            Err(FuseError::Shape(format!(
                "field {}x{} vs {h}x{w}",
                self.height, self.width
            )))
        }
    }

    /// The field as a `[1, 2, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.dx.iter().chain(&self.dy).map(|&v| T::lit(v as f64)).collect();
        Tensor::new(&[1, 2, self.height, self.width], data)
    }

    /// Field `index` of an `[N, 2, H, W]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 2 || index >= s[0] {
            return Err(FuseError::Shape(format!("cannot take field {index} of {s:?}")));
        }
        let hw = s[2] * s[3];
        let base = index * 2 * hw;
        let plane = |c: usize| -> Vec<f32> {
            t.data()[base + c * hw..base + (c + 1) * hw]
                .iter()
                .map(|v| v.as_f64() as f32)
                .collect()
        };
        Self::new(s[2], s[3], plane(0), plane(1))
    }

    /// The same geometric transform [`Augment`] applies to images, with
    /// displacement vectors rotated accordingly.
    pub fn augmented(&self, op: Augment) -> Self {
        let (h, w) = op.output_dims(self.height, self.width);
        let sdx = op.apply_plane(&self.dx, self.height, self.width);
        let sdy = op.apply_plane(&self.dy, self.height, self.width);
        let (dx, dy) = sdx
            .iter()
            .zip(&sdy)
            .map(|(&a, &b)| op.map_vector(a, b))
            .unzip();
        Self {
            height: h,
            width: w,
            dx,
            dy,
        }
    }
}

/// Writes `F32D`, height, width, then the dx plane and the dy plane.
pub fn encode_field(field: &DeformationField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * field.dx.len());
    out.extend_from_slice(F32D_MAGIC);
    out.extend_from_slice(&(field.height as u32).to_le_bytes());
    out.extend_from_slice(&(field.width as u32).to_le_bytes());
    for v in field.dx.iter().chain(&field.dy) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<DeformationField> {
    let (h, w, mut values) = decode_header_grid(bytes, F32D_MAGIC, 2)?;
    let dy = values.split_off(h * w);
    DeformationField::new(h, w, values, dy)
}

pub fn save_field(field: &DeformationField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_field(field)).map_err(|e| FuseError::io(path, e))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    let path = path.as_ref();
    decode_field(&fs::read(path).map_err(|e| FuseError::io(path, e))?)
}

/// One bilinear tap: the four neighbours, their weights' fractional parts,
/// and whether each coordinate was inside the clamp range.
#[derive(Clone, Copy)]
struct Tap<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    ax: T,
    ay: T,
    free_x: bool,
    free_y: bool,
}

#[inline]
fn tap<T: Real>(x: usize, y: usize, fx: T, fy: T, h: usize, w: usize) -> Tap<T> {
    let sx = T::lit(x as f64) + fx;
    let sy = T::lit(y as f64) + fy;
    let (wmax, hmax) = (T::lit((w - 1) as f64), T::lit((h - 1) as f64));
    let free_x = sx > T::zero() && sx < wmax;
    let free_y = sy > T::zero() && sy < hmax;
    let cx = sx.max(T::zero()).min(wmax);
    let cy = sy.max(T::zero()).min(hmax);
    let x0 = cx.floor().to_usize().unwrap_or(0).min(w - 1);
    let y0 = cy.floor().to_usize().unwrap_or(0).min(h - 1);
    Tap {
        x0,
        x1: (x0 + 1).min(w - 1),
        y0,
        y1: (y0 + 1).min(h - 1),
        ax: cx - T::lit(x0 as f64),
        ay: cy - T::lit(y0 as f64),
        free_x,
        free_y,
    }
}

fn check_warp_shapes(img: &[usize], field: &[usize]) {
    assert!(img.len() == 4 && field.len() == 4, "warp expects NCHW tensors");
    assert!(
        img[0] == field[0] && field[1] == 2 && img[2] == field[2] && img[3] == field[3],
        "warp shape mismatch: image {img:?}, field {field:?}"
    );
}

/// Forward resampling of an `[N, C, H, W]` buffer by an `[N, 2, H, W]` field.
pub(crate) fn warp_forward<T: Real>(img: &[T], shape: &[usize], field: &[T]) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;
    let mut out = vec![T::zero(); img.len()];
    for b in 0..n {
        let fx = &field[b * 2 * hw..b * 2 * hw + hw];
        let fy = &field[b * 2 * hw + hw..(b + 1) * 2 * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let t = tap(x, y, fx[p], fy[p], h, w);
                for ch in 0..c {
                    let src = &img[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    let top = lerp(src[t.y0 * w + t.x0], src[t.y0 * w + t.x1], t.ax);
                    let bot = lerp(src[t.y1 * w + t.x0], src[t.y1 * w + t.x1], t.ax);
                    out[(b * c + ch) * hw + p] = lerp(top, bot, t.ay);
                }
            }
        }
    }
    out
}

/// `a + t (b - a)`: exact when `t == 0`.
#[inline(always)]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// Differentiable warp of an `[N, C, H, W]` variable by an `[N, 2, H, W]`
/// field variable.
pub fn warp_var<'t, T: Real>(img: Var<'t, T>, field: Var<'t, T>) -> Var<'t, T> {
    let (iv, fv) = (img.value(), field.value());
    check_warp_shapes(iv.shape(), fv.shape());
    let shape = iv.shape().to_vec();
    let out = warp_forward(iv.data(), &shape, fv.data());
    let (need_i, need_f) = (img.requires_grad(), field.requires_grad());
    img.tape()
        .custom(&[img, field], Tensor::new(&shape, out), move |g| {
            let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let hw = h * w;
            let (src, fd, gd) = (iv.data(), fv.data(), g.data());
            let mut gi = need_i.then(|| vec![T::zero(); src.len()]);
            let mut gf = need_f.then(|| vec![T::zero(); fd.len()]);
            let one = T::one();
            for b in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        let t = tap(x, y, fd[b * 2 * hw + p], fd[b * 2 * hw + hw + p], h, w);
                        let (mut dsx, mut dsy) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let go = gd[base + p];
                            if let Some(gi) = gi.as_mut() {
                                gi[base + t.y0 * w + t.x0] += go * (one - t.ax) * (one - t.ay);
                                gi[base + t.y0 * w + t.x1] += go * t.ax * (one - t.ay);
                                gi[base + t.y1 * w + t.x0] += go * (one - t.ax) * t.ay;
                                gi[base + t.y1 * w + t.x1] += go * t.ax * t.ay;
                            }
                            if gf.is_some() {
                                let v00 = src[base + t.y0 * w + t.x0];
                                let v01 = src[base + t.y0 * w + t.x1];
                                let v10 = src[base + t.y1 * w + t.x0];
                                let v11 = src[base + t.y1 * w + t.x1];
                                dsx += go * ((one - t.ay) * (v01 - v00) + t.ay * (v11 - v10));
                                dsy += go * ((one - t.ax) * (v10 - v00) + t.ax * (v11 - v01));
                            }
                        }
                        if let Some(gf) = gf.as_mut() {
                            if t.free_x {
                                gf[b * 2 * hw + p] += dsx;
                            }
                            if t.free_y {
                                gf[b * 2 * hw + hw + p] += dsy;
                            }
                        }
                    }
                }
            }
            vec![
                gi.map(|v| Tensor::new(&shape, v)),
                gf.map(|v| Tensor::new(&[n, 2, h, w], v)),
            ]
        })
}

/// `inner + warp(outer, inner)`: apply `inner` first, then `outer`.
pub fn compose_var<'t, T: Real>(outer: Var<'t, T>, inner: Var<'t, T>) -> Var<'t, T> {
    inner.add(warp_var(outer, inner))
}

/// Bilinear resize of every plane of a buffer with half-pixel centres.
pub(crate) fn resize_plane<T: Real>(src: &[T], h: usize, w: usize, h2: usize, w2: usize) -> Vec<T> {
    let planes = src.len() / (h * w);
    let ty = resize_taps(h, h2);
    let tx = resize_taps(w, w2);
    let mut out = Vec::with_capacity(planes * h2 * w2);
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            let fy = T::lit(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::lit(fx);
                let top = lerp(s[y0 * w + x0], s[y0 * w + x1], fx);
                let bot = lerp(s[y1 * w + x0], s[y1 * w + x1], fx);
                out.push(lerp(top, bot, fy));
            }
        }
    }
    out
}

/// Differentiable bilinear resize of an `[N, C, H, W]` variable.
pub fn resize_var<'t, T: Real>(x: Var<'t, T>, h2: usize, w2: usize) -> Var<'t, T> {
    let xv = x.value();
    let s = xv.shape().to_vec();
    assert_eq!(s.len(), 4, "resize expects NCHW");
    let (h, w) = (s[2], s[3]);
    if (h, w) == (h2, w2) {
        return x;
    }
    let out = resize_plane(xv.data(), h, w, h2, w2);
    let out_shape = [s[0], s[1], h2, w2];
    drop(xv);
    x.tape()
        .custom(&[x], Tensor::new(&out_shape, out), move |g| {
            let ty = resize_taps(h, h2);
            let tx = resize_taps(w, w2);
            let planes = s[0] * s[1];
            let mut gx = vec![T::zero(); planes * h * w];
            let one = T::one();
            for p in 0..planes {
                let gp = &g.data()[p * h2 * w2..(p + 1) * h2 * w2];
                let dst = &mut gx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let fy = T::lit(fy);
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let fx = T::lit(fx);
                        let go = gp[oy * w2 + ox];
                        dst[y0 * w + x0] += go * (one - fx) * (one - fy);
                        dst[y0 * w + x1] += go * fx * (one - fy);
                        dst[y1 * w + x0] += go * (one - fx) * fy;
                        dst[y1 * w + x1] += go * fx * fy;
                    }
                }
            }
            vec![Some(Tensor::new(&s, gx))]
        })
}

/// Resizes an `[N, 2, H, W]` field to `h2 x w2` and rescales the
/// displacements so they stay in pixels of the new grid.
pub fn upsample_field_var<'t, T: Real>(field: Var<'t, T>, h2: usize, w2: usize) -> Var<'t, T> {
    let s = field.shape();
    if (s[2], s[3]) == (h2, w2) {
        return field;
    }
    let scale = Tensor::new(
        &[1, 2, 1, 1],
        vec![T::lit(w2 as f64 / s[3] as f64), T::lit(h2 as f64 / s[2] as f64)],
    );
    resize_var(field, h2, w2).mul(field.tape().constant(scale))
}

/// Mean absolute forward difference, averaged over the two axes.
pub fn smoothness_var<'t, T: Real>(field: Var<'t, T>) -> Var<'t, T> {
    let s = field.shape();
    let (h, w) = (s[2], s[3]);
    let gx = field.narrow(3, 1, w - 1).sub(field.narrow(3, 0, w - 1)).abs().mean_all();
    let gy = field.narrow(2, 1, h - 1).sub(field.narrow(2, 0, h - 1)).abs().mean_all();
    gx.add(gy).mul_scalar(0.5)
}

/// Horizontal and vertical Sobel kernels as a `[2, 1, 3, 3]` weight.
pub fn sobel_kernels<T: Real>() -> Tensor<T> {
    let k = [
        -1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0, //
        -1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0,
    ];
    Tensor::new(&[2, 1, 3, 3], k.iter().map(|&v| T::lit(v)).collect())
}

/// `|Gx| + |Gy|` of an `[N, 1, H, W]` variable with replicate padding.
pub fn sobel_var<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let k = x.tape().constant(sobel_kernels());
    let g = x.pad_replicate(1).conv2d(k, None, Conv2dSpec::new(1, 0)).abs();
    g.sum_axis(1, true)
}

fn run_graph<T: Real>(f: impl for<'t> Fn(&'t fusekit_autograd::Tape<T>) -> Var<'t, T>) -> Tensor<T> {
    let tape = fusekit_autograd::Tape::new();
    let out = f(&tape).value();
    (*out).clone()
}

/// Resamples `img` at `x + field(x)`.
pub fn warp(img: &Image, field: &DeformationField) -> Result<Image> {
    field.check_shape(img.height(), img.width())?;
    let out = warp_forward(img.pixels(), &[1, 1, img.height(), img.width()], &field.to_tensor::<f32>().into_data());
    Image::from_clamped(img.height(), img.width(), out, img.modality())
}

pub fn negate_field(field: &DeformationField) -> DeformationField {
    DeformationField {
        height: field.height,
        width: field.width,
        dx: field.dx.iter().map(|v| -v).collect(),
        dy: field.dy.iter().map(|v| -v).collect(),
    }
}

/// Bilinear upsampling of a field with displacement rescaling.
pub fn upsample_field(field: &DeformationField, h2: usize, w2: usize) -> Result<DeformationField> {
    if h2 < field.height || w2 < field.width {
        return Err(FuseError::Invalid(format!(
            "cannot upsample {}x{} to smaller {h2}x{w2}",
            field.height, field.width
        )));
    }
    let t = run_graph(|tape| upsample_field_var(tape.constant(field.to_tensor::<f64>()), h2, w2));
    DeformationField::from_tensor(&t, 0)
}

/// `inner(x) + outer(x + inner(x))`.
pub fn compose_fields(outer: &DeformationField, inner: &DeformationField) -> Result<DeformationField> {
    outer.check_shape(inner.height, inner.width)?;
    let t = run_graph(|tape| {
        compose_var(tape.constant(outer.to_tensor::<f64>()), tape.constant(inner.to_tensor::<f64>()))
    });
    DeformationField::from_tensor(&t, 0)
}

pub fn smoothness_loss(field: &DeformationField) -> f64 {
    run_graph(|tape| smoothness_var(tape.constant(field.to_tensor::<f64>()))).item()
}

/// Sobel magnitude as an `H x W` tensor. Values may exceed 1, so the result
/// is not an [`Image`].
pub fn sobel_gradient(img: &Image) -> Tensor<f32> {
    let t = run_graph(|tape| sobel_var(tape.constant(img.to_tensor::<f32>())));
    t.reshape(&[img.height(), img.width()])
}
