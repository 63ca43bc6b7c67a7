//! Single-channel images, their file formats, augmentation, resampling and
//! the synthetic misaligned phantom pairs used in place of scanner data.
//!
//! Two formats are supported: 8-bit grayscale PNG for viewing and a raw
//! float grid (`R32F`, then height and width as little-endian `u32`, then
//! row-major little-endian `f32`) for lossless storage.

use std::fmt;
use std::fs;
use std::path::Path;

use fusekit_autograd::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{FuseError, Result};
use crate::warpfield::{self, DeformationField};

/// Smallest accepted side length.
pub const MIN_SIDE: usize = 8;

const R32F_MAGIC: &[u8; 4] = b"R32F";
const PNG_SIGNATURE: &[u8; 8] = b"\x89PNG\r\n\x1a\n";

/// What an image depicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Pat,
    Mri,
    PseudoMri,
    Fused,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Pat => "PAT",
            Modality::Mri => "MRI",
            Modality::PseudoMri => "PSEUDO_MRI",
            Modality::Fused => "FUSED",
        })
    }
}

/// A single-channel image with every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
    modality: Modality,
}

impl Image {
    /// Validates size and range.
    pub fn new(height: usize, width: usize, pixels: Vec<f32>, modality: Modality) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(FuseError::Invalid(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if pixels.len() != height * width {
            return Err(FuseError::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(FuseError::Invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
            modality,
        })
    }

    /// Builds an image by clamping arbitrary values into `[0, 1]`
    /// (NaN becomes 0).
    pub fn from_clamped(height: usize, width: usize, values: impl IntoIterator<Item = f32>, modality: Modality) -> Result<Self> {
        let pixels = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, pixels, modality)
    }

    pub fn constant(height: usize, width: usize, value: f32, modality: Modality) -> Result<Self> {
        Self::new(height, width, vec![value; height * width], modality)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        modality: Modality,
        f: impl Fn(usize, usize) -> f32,
    ) -> Result<Self> {
        let values = (0..height).flat_map(|y| (0..width).map(move |x| (y, x))).map(|(y, x)| f(y, x));
        Self::from_clamped(height, width, values.collect::<Vec<_>>(), modality)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn with_modality(mut self, modality: Modality) -> Self {
        self.modality = modality;
        self
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(FuseError::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// The image as a `[1, 1, H, W]` tensor.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.pixels.iter().map(|&v| T::lit(v as f64)).collect(),
        )
    }

    /// Image `index` of an `[N, 1, H, W]` tensor, clamped into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize, modality: Modality) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 || index >= s[0] {
            return Err(FuseError::Shape(format!("cannot take image {index} of {s:?}")));
        }
        let hw = s[2] * s[3];
        let vals = t.data()[index * hw..(index + 1) * hw].iter().map(|v| v.as_f64() as f32);
        Self::from_clamped(s[2], s[3], vals.collect::<Vec<_>>(), modality)
    }

    /// Mean pixel value.
    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

/// Stacks same-sized images into an `[N, 1, H, W]` tensor.
pub fn stack<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| FuseError::Invalid("cannot stack zero images".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.pixels.len());
    for img in images {
        first.check_same_shape(img)?;
        data.extend(img.pixels.iter().map(|&v| T::lit(v as f64)));
    }
    Ok(Tensor::new(&[images.len(), 1, first.height, first.width], data))
}

/// On-disk representation chosen for [`save_image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png8,
    RawF32,
}

impl ImageFormat {
    /// `.png` selects PNG; `.r32f`, `.raw` and `.f32` select the float grid.
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("png") => Ok(Self::Png8),
            Some("r32f") | Some("raw") | Some("f32") => Ok(Self::RawF32),
            _ => Err(FuseError::Format(format!(
                "cannot infer image format from {}",
                path.display()
            ))),
        }
    }
}

/// Reads a PNG (8-bit or 16-bit grayscale) or `R32F` file, detected by content.
/// Loaded images are tagged as PAT; callers retag as needed.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| FuseError::io(path, e))?;
    if bytes.starts_with(R32F_MAGIC) {
        decode_r32f(&bytes)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes)
    } else {
        Err(FuseError::Format(format!("{}: neither PNG nor R32F", path.display())))
    }
}

/// Writes an image; the format follows the file extension.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match ImageFormat::from_path(path)? {
        ImageFormat::Png8 => encode_png(img)?,
        ImageFormat::RawF32 => encode_r32f(img),
    };
    fs::write(path, bytes).map_err(|e| FuseError::io(path, e))
}

pub fn encode_r32f(img: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * img.pixels.len());
    out.extend_from_slice(R32F_MAGIC);
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    for v in &img.pixels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_r32f(bytes: &[u8]) -> Result<Image> {
    let (h, w, values) = decode_header_grid(bytes, R32F_MAGIC, 1)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FuseError::Format("R32F grid contains non-finite values".into()));
    }
    Image::new(h, w, values, Modality::Pat)
}

/// Parses `magic, u32 H, u32 W, planes*H*W f32`.
pub(crate) fn decode_header_grid(bytes: &[u8], magic: &[u8; 4], planes: usize) -> Result<(usize, usize, Vec<f32>)> {
    let name = String::from_utf8_lossy(magic);
    if bytes.len() < 12 || &bytes[..4] != magic {
        return Err(FuseError::Format(format!("missing {name} header")));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(planes))
        .ok_or_else(|| FuseError::Format(format!("{name} dims overflow")))?;
    let body = &bytes[12..];
    if body.len() != 4 * n {
        return Err(FuseError::Format(format!(
            "{name} payload is {} bytes, expected {}",
            body.len(),
            4 * n
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((h, w, values))
}

/// Quantizes to 8 bits with round-to-nearest.
pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| FuseError::Format(format!("png header: {e}")))?;
        let data: Vec<u8> = img.pixels.iter().map(|&v| (v * 255.0).round() as u8).collect();
        writer
            .write_image_data(&data)
            .map_err(|e| FuseError::Format(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder
        .read_info()
        .map_err(|e| FuseError::Format(format!("png: {e}")))?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    let (color, depth) = (info.color_type, info.bit_depth);
    if color != png::ColorType::Grayscale {
        return Err(FuseError::Format(format!("png is {color:?}, expected grayscale")));
    }
    if depth == png::BitDepth::Sixteen {
        let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(2 * w * h)];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| FuseError::Format(format!("png: {e}")))?;
        let px = buf[..frame.buffer_size()]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 65535.0)
            .collect();
        return Image::new(h, w, px, Modality::Pat);
    }
    if depth != png::BitDepth::Eight {
        return Err(FuseError::Format(format!("png bit depth {depth:?} not supported")));
    }
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(w * h)];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| FuseError::Format(format!("png: {e}")))?;
    let px = buf[..frame.buffer_size()].iter().map(|&v| v as f32 / 255.0).collect();
    Image::new(h, w, px, Modality::Pat)
}

/// Lossless geometric augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Augment {
    /// Quarter turn counter-clockwise.
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
}

impl Augment {
    pub const ALL: [Augment; 5] = [Augment::Rot90, Augment::Rot180, Augment::Rot270, Augment::FlipH, Augment::FlipV];

    pub fn inverse(self) -> Augment {
        match self {
            Augment::Rot90 => Augment::Rot270,
            Augment::Rot270 => Augment::Rot90,
            other => other,
        }
    }

    /// Output dimensions for an input of `h x w`.
    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Augment::Rot90 | Augment::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Source index `(y, x)` in the input for output pixel `(i, j)`.
    fn source(self, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Augment::Rot90 => (j, w - 1 - i),
            Augment::Rot180 => (h - 1 - i, w - 1 - j),
            Augment::Rot270 => (h - 1 - j, i),
            Augment::FlipH => (i, w - 1 - j),
            Augment::FlipV => (h - 1 - i, j),
        }
    }

    /// Applies the transform to a row-major plane.
    pub fn apply_plane<T: Copy>(self, plane: &[T], h: usize, w: usize) -> Vec<T> {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let (y, x) = self.source(i, j, h, w);
                out.push(plane[y * w + x]);
            }
        }
        out
    }

    /// How a displacement `(dx, dy)` transforms: the linear part of the
    /// pixel mapping.
    pub fn map_vector(self, dx: f32, dy: f32) -> (f32, f32) {
        match self {
            Augment::Rot90 => (dy, -dx),
            Augment::Rot180 => (-dx, -dy),
            Augment::Rot270 => (-dy, dx),
            Augment::FlipH => (-dx, dy),
            Augment::FlipV => (dx, -dy),
        }
    }
}

/// Rotates or flips an image.
pub fn augment(img: &Image, op: Augment) -> Image {
    let (h, w) = op.output_dims(img.height, img.width);
    Image {
        height: h,
        width: w,
        pixels: op.apply_plane(&img.pixels, img.height, img.width),
        modality: img.modality,
    }
}

/// Source sampling positions for a 1-D bilinear resize with half-pixel
/// centres: `(i0, i1, frac)` per output index.
pub(crate) fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize(img: &Image, h: usize, w: usize) -> Result<Image> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(FuseError::Invalid(format!("resize target {h}x{w} below {MIN_SIDE}")));
    }
    let out = warpfield::resize_plane(&img.pixels, img.height, img.width, h, w);
    Image::from_clamped(h, w, out, img.modality)
}

/// A PAT/MRI pair rendered from one anatomy, with the MRI warped by a known
/// smooth field.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    pub pat: Image,
    /// `warp(aligned_mri, true_field)`.
    pub mri: Image,
    /// The MRI rendering in the PAT geometry, before deformation.
    pub aligned_mri: Image,
    /// The field that maps the PAT geometry onto the MRI geometry:
    /// `warp(pat, true_field)` is aligned with `mri`.
    pub true_field: DeformationField,
    pub seed: u64,
}

impl PhantomPair {
    /// The same transform applied to both images and the field.
    pub fn augmented(&self, op: Augment) -> PhantomPair {
        PhantomPair {
            pat: augment(&self.pat, op),
            mri: augment(&self.mri, op),
            aligned_mri: augment(&self.aligned_mri, op),
            true_field: self.true_field.augmented(op),
            seed: self.seed,
        }
    }

    /// The PAT image resampled into the MRI geometry by the true field.
    pub fn ideal_registered_pat(&self) -> Image {
        warpfield::warp(&self.pat, &self.true_field).expect("phantom members share a shape")
    }
}

struct Organ {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
    mri: f64,
    pat: f64,
}

impl Organ {
    /// Normalized elliptical radius: 1 on the boundary.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        (u * u + v * v).sqrt()
    }
}

fn soft_inside(r: f64, softness: f64) -> f64 {
    1.0 / (1.0 + ((r - 1.0) / softness).exp())
}

fn box_blur(plane: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0.0;
                for d in -(radius as isize)..=(radius as isize) {
                    let (yy, xx) = if horizontal {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    let yy = yy.clamp(0, h as isize - 1) as usize;
                    let xx = xx.clamp(0, w as isize - 1) as usize;
                    s += src[yy * w + xx];
                    n += 1.0;
                }
                out[y * w + x] = s / n;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Renders a deterministic misaligned phantom pair.
///
/// The shared anatomy is a body ellipse holding 3 to 6 elliptical organs.
/// The MRI view fills regions smoothly and sharpens edges; the PAT view has
/// a bright skin rim, thin vessel-like curves, organ absorption contrast and
/// multiplicative speckle on a dark background. The MRI view is then warped
/// by a sum of three Gaussian displacement bumps whose maximum norm equals
/// `deform_magnitude` pixels.
pub fn make_phantom_pair(seed: u64, h: usize, w: usize, deform_magnitude: f64) -> Result<PhantomPair> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(FuseError::Invalid(format!("phantom size {h}x{w} below {MIN_SIDE}")));
    }
    if !(deform_magnitude >= 0.0 && deform_magnitude.is_finite()) {
        return Err(FuseError::Invalid(format!("deform magnitude {deform_magnitude} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let side = hf.min(wf);

    let body = Organ {
        cy: hf * rng.random_range(0.45..0.55),
        cx: wf * rng.random_range(0.45..0.55),
        ry: hf * rng.random_range(0.36..0.44),
        rx: wf * rng.random_range(0.36..0.44),
        cos: 1.0,
        sin: 0.0,
        mri: rng.random_range(0.25..0.35),
        pat: rng.random_range(0.08..0.14),
    };
    let n_organs = rng.random_range(3..=6);
    let organs: Vec<Organ> = (0..n_organs)
        .map(|_| {
            let ang = rng.random_range(0.0..std::f64::consts::PI);
            let rad = rng.random_range(0.0..0.55);
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            Organ {
                cy: body.cy + rad * body.ry * theta.sin(),
                cx: body.cx + rad * body.rx * theta.cos(),
                ry: side * rng.random_range(0.06..0.16),
                rx: side * rng.random_range(0.06..0.16),
                cos: ang.cos(),
                sin: ang.sin(),
                mri: rng.random_range(0.45..0.95),
                pat: rng.random_range(0.15..0.55),
            }
        })
        .collect();

    // vessel-like curves: sinusoidally bent chords inside the body
    struct Vessel {
        y0: f64,
        x0: f64,
        dy: f64,
        dx: f64,
        amp: f64,
        freq: f64,
        phase: f64,
        width: f64,
        gain: f64,
    }
    let n_vessels = rng.random_range(3..=6);
    let vessels: Vec<Vessel> = (0..n_vessels)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let len = side * rng.random_range(0.25..0.6);
            Vessel {
                y0: body.cy + body.ry * rng.random_range(-0.6..0.6),
                x0: body.cx + body.rx * rng.random_range(-0.6..0.6),
                dy: theta.sin() * len,
                dx: theta.cos() * len,
                amp: side * rng.random_range(0.02..0.06),
                freq: rng.random_range(1.0..3.0),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                width: rng.random_range(0.6..1.1),
                gain: rng.random_range(0.5..0.9),
            }
        })
        .collect();

    let mut mri = vec![0.0f64; h * w];
    let mut pat = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let rb = body.radius(py, px);
            let inside = soft_inside(rb, 0.02);
            let mut m = 0.05 + inside * body.mri;
            let mut p = inside * body.pat;
            for o in &organs {
                let s = soft_inside(o.radius(py, px), 0.08) * inside;
                m += s * (o.mri - body.mri);
                p += s * (o.pat - body.pat);
            }
            // skin rim, bright in PAT
            p += 0.55 * (-((rb - 1.0) * side * 0.5).powi(2)).exp();
            mri[y * w + x] = m;
            pat[y * w + x] = p;
        }
    }
    for v in &vessels {
        let steps = (v.dx.hypot(v.dy) * 3.0) as usize + 2;
        let (nx, ny) = (-v.dy / v.dx.hypot(v.dy), v.dx / v.dx.hypot(v.dy));
        let mut pts = Vec::with_capacity(steps);
        for s in 0..steps {
            let t = s as f64 / (steps - 1) as f64;
            let off = v.amp * (std::f64::consts::TAU * v.freq * t + v.phase).sin();
            pts.push((v.y0 + t * v.dy + off * ny, v.x0 + t * v.dx + off * nx));
        }
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
                let d2 = pts
                    .iter()
                    .map(|(qy, qx)| (py - qy).powi(2) + (px - qx).powi(2))
                    .fold(f64::INFINITY, f64::min);
                if d2 < 16.0 * v.width * v.width {
                    let inside = soft_inside(body.radius(py, px), 0.02);
                    pat[y * w + x] += v.gain * inside * (-d2 / (2.0 * v.width * v.width)).exp();
                }
            }
        }
    }
    // multiplicative speckle, slightly correlated
    let noise: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise = box_blur(&noise, h, w, 0)
        .iter()
        .zip(box_blur(&noise, h, w, 1))
        .map(|(a, b)| 0.5 * a + 1.5 * b)
        .collect::<Vec<_>>();
    for (p, n) in pat.iter_mut().zip(&noise) {
        *p *= 1.0 + 0.35 * n;
    }
    // MRI: smooth then unsharp-mask for crisp region edges
    let smooth = box_blur(&mri, h, w, 1);
    let blur2 = box_blur(&smooth, h, w, 2);
    let mri: Vec<f64> = smooth
        .iter()
        .zip(&blur2)
        .map(|(s, b)| s + 0.6 * (s - b))
        .collect();

    let pat_img = Image::from_clamped(h, w, pat.iter().map(|&v| v as f32).collect::<Vec<_>>(), Modality::Pat)?;
    let aligned_mri =
        Image::from_clamped(h, w, mri.iter().map(|&v| v as f32).collect::<Vec<_>>(), Modality::Mri)?;
    let true_field = random_smooth_field(&mut rng, h, w, deform_magnitude);
    let mri_img = warpfield::warp(&aligned_mri, &true_field)?;
    Ok(PhantomPair {
        pat: pat_img,
        mri: mri_img,
        aligned_mri,
        true_field,
        seed,
    })
}

/// Sum of three Gaussian displacement bumps rescaled so that the largest
/// displacement norm equals `magnitude`.
fn random_smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, magnitude: f64) -> DeformationField {
    let side = h.min(w) as f64;
    let bumps: Vec<(f64, f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.0);
            (
                h as f64 * rng.random_range(0.2..0.8),
                w as f64 * rng.random_range(0.2..0.8),
                side * rng.random_range(0.18..0.35),
                amp * theta.cos(),
                amp * theta.sin(),
            )
        })
        .collect();
    let mut dx = vec![0.0f64; h * w];
    let mut dy = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            for &(cy, cx, s, ax, ay) in &bumps {
                let g = (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / (2.0 * s * s)).exp();
                dx[y * w + x] += ax * g;
                dy[y * w + x] += ay * g;
            }
        }
    }
    let max = dx.iter().zip(&dy).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
    let scale = if max > 0.0 { magnitude / max } else { 0.0 };
    // shrink by one ulp-scale factor so rounding to f32 never exceeds the bound
    let scale = scale * (1.0 - 1e-6);
    DeformationField::new(
        h,
        w,
        dx.iter().map(|v| (v * scale) as f32).collect(),
        dy.iter().map(|v| (v * scale) as f32).collect(),
    )
    .expect("generated field is finite")
}

/// Number of worker threads for data-parallel helpers, from `PAMR_THREADS`
/// (default: all available cores).
pub fn worker_threads() -> usize {
    std::env::var("PAMR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` inside a rayon pool sized by [`worker_threads`].
pub fn with_workers<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(worker_threads()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Per-pair seed derived from the dataset seed (SplitMix64 step).
pub fn pair_seed(dataset_seed: u64, index: usize) -> u64 {
    let mut z = dataset_seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A list of phantom pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<PhantomPair>,
}

impl Dataset {
    /// `count` pairs generated in parallel; the result does not depend on
    /// the number of workers.
    pub fn generate(seed: u64, count: usize, size: usize, deform_magnitude: f64) -> Result<Self> {
        let pairs = with_workers(|| {
            (0..count)
                .into_par_iter()
                .map(|i| make_phantom_pair(pair_seed(seed, i), size, size, deform_magnitude))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The first `len - n_test` pairs and the last `n_test` pairs.
    pub fn split(&self, n_test: usize) -> (Dataset, Dataset) {
        let cut = self.pairs.len().saturating_sub(n_test);
        (
            Dataset {
                pairs: self.pairs[..cut].to_vec(),
            },
            Dataset {
                pairs: self.pairs[cut..].to_vec(),
            },
        )
    }

    /// Every pair followed by its five rotated and flipped variants.
    pub fn with_augmentations(&self) -> Dataset {
        let mut pairs = Vec::with_capacity(self.pairs.len() * 6);
        for p in &self.pairs {
            pairs.push(p.clone());
            pairs.extend(Augment::ALL.iter().map(|&op| p.augmented(op)));
        }
        Dataset { pairs }
    }
}
