//! Registration and fusion quality metrics, and the report tables that
//! collect them.
//!
//! All metrics work on `[0, 1]` intensities in double precision. Histogram
//! based measures use 256 uniform bins and base-2 logarithms.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{FuseError, Result};
use crate::fusenet::{gaussian_window, SSIM_SIGMA, SSIM_WINDOW};
use crate::imagedata::{with_workers, Image, PhantomPair};
use crate::warpfield::{self, DeformationField};

/// Histogram bins used by every information-theoretic metric.
pub const BINS: usize = 256;
/// Noise variance of the visual-information channel model (255 scale).
pub const VIF_NOISE_VAR: f64 = 2.0;
/// Pyramid levels of the visual-information measure.
pub const VIF_SCALES: usize = 4;
/// Smallest side accepted by [`vif`].
pub const VIF_MIN_SIDE: usize = 32;
/// Smallest side accepted by [`fmi`].
pub const FMI_MIN_SIDE: usize = 16;

/// Published registration reference values on real animal data, columns
/// MI, NMI, CC: the unregistered inputs and the full method. Kept for
/// documentation; phantoms are not expected to reproduce them.
pub const REFERENCE_REGISTRATION_BASELINE: [f64; 3] = [0.2807, 0.1119, 0.2096];
pub const REFERENCE_REGISTRATION_METHOD: [f64; 3] = [0.3082, 0.1225, 0.2900];
/// Published fusion reference row of the full method, in
/// [`FUSION_COLUMNS`] order.
pub const REFERENCE_FUSION_METHOD: [f64; 8] = [4.2421, 0.8421, 0.7099, 0.0434, 0.9629, 0.9077, 0.3040, 0.4498];

/// Column order of registration reports.
pub const REGISTRATION_COLUMNS: [&str; 3] = ["MI", "NMI", "CC"];
/// Column order of fusion reports.
pub const FUSION_COLUMNS: [&str; 8] = ["MI", "VIF", "Qabf", "SF", "SSIM", "FMI_pixel", "FMI_dct", "FMI_w"];

fn to_f64(img: &Image) -> Vec<f64> {
    img.pixels().iter().map(|&v| v as f64).collect()
}

fn bin_of(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a u64>, n: f64) -> f64 {
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    h
}

/// Marginal and joint entropies `(H(a), H(b), H(a, b))` of two equally long
/// sequences of `[0, 1]` values.
pub fn entropies(a: &[f64], b: &[f64], bins: usize) -> (f64, f64, f64) {
    assert_eq!(a.len(), b.len());
    let mut ha = vec![0u64; bins];
    let mut hb = vec![0u64; bins];
    let mut joint = vec![0u64; bins * bins];
    for (&x, &y) in a.iter().zip(b) {
        let (i, j) = (bin_of(x, bins), bin_of(y, bins));
        ha[i] += 1;
        hb[j] += 1;
        joint[i * bins + j] += 1;
    }
    let n = a.len() as f64;
    (
        entropy_of_counts(ha.iter(), n),
        entropy_of_counts(hb.iter(), n),
        entropy_of_counts(joint.iter(), n),
    )
}

fn mi_values(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let (ha, hb, hab) = entropies(a, b, bins);
    (ha + hb - hab).max(0.0)
}

/// `H(a) + H(b) - H(a, b)` in bits.
pub fn mutual_information(a: &Image, b: &Image, bins: usize) -> Result<f64> {
    a.check_same_shape(b)?;
    if bins == 0 {
        return Err(FuseError::Invalid("histogram needs at least one bin".into()));
    }
    Ok(mi_values(&to_f64(a), &to_f64(b), bins))
}

/// `2 MI / (H(a) + H(b))`.
pub fn normalized_mutual_information(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let (ha, hb, hab) = entropies(&to_f64(a), &to_f64(b), BINS);
    if ha + hb == 0.0 {
        return Err(FuseError::Degenerate("both images have zero entropy".into()));
    }
    Ok((2.0 * (ha + hb - hab) / (ha + hb)).clamp(0.0, 1.0))
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(FuseError::Degenerate("correlation of a constant image".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation of the flattened intensities.
pub fn normalized_cross_correlation(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    pearson(&to_f64(a), &to_f64(b))
}

/// `MI(fused, a) + MI(fused, b)`.
pub fn fusion_mi(fused: &Image, a: &Image, b: &Image) -> Result<f64> {
    Ok(mutual_information(fused, a, BINS)? + mutual_information(fused, b, BINS)?)
}

/// `sqrt(RF^2 + CF^2)` with RF and CF the root-mean-square horizontal and
/// vertical first differences.
pub fn spatial_frequency(img: &Image) -> f64 {
    let (h, w) = (img.height(), img.width());
    let p = to_f64(img);
    let mut rf = 0.0;
    for y in 0..h {
        for x in 1..w {
            rf += (p[y * w + x] - p[y * w + x - 1]).powi(2);
        }
    }
    let mut cf = 0.0;
    for y in 1..h {
        for x in 0..w {
            cf += (p[y * w + x] - p[(y - 1) * w + x]).powi(2);
        }
    }
    let rf = rf / (h * (w - 1)) as f64;
    let cf = cf / ((h - 1) * w) as f64;
    (rf + cf).sqrt()
}

// ---- windowed statistics ----------------------------------------------------

/// Separable "valid" correlation of an `h x w` plane with `taps` along both axes.
fn filter_valid(p: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Windowed means, variances and covariance of two planes.
struct LocalStats {
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    var_a: Vec<f64>,
    var_b: Vec<f64>,
    cov: Vec<f64>,
}

fn local_stats(a: &[f64], b: &[f64], h: usize, w: usize, taps: &[f64]) -> LocalStats {
    let f = |p: &[f64]| filter_valid(p, h, w, taps).0;
    let mu_a = f(a);
    let mu_b = f(b);
    let var_a = f(&mul(a, a)).iter().zip(&mu_a).map(|(e, m)| e - m * m).collect();
    let var_b = f(&mul(b, b)).iter().zip(&mu_b).map(|(e, m)| e - m * m).collect();
    let cov = f(&mul(a, b))
        .iter()
        .zip(mu_a.iter().zip(&mu_b))
        .map(|(e, (x, y))| e - x * y)
        .collect();
    LocalStats {
        mu_a,
        mu_b,
        var_a,
        var_b,
        cov,
    }
}

/// Window side used by [`ssim_index`]: 11, or the largest odd size that fits.
pub fn ssim_window_for(h: usize, w: usize) -> usize {
    let m = h.min(w).min(SSIM_WINDOW);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Mean SSIM with a Gaussian window (sigma 1.5) over valid positions. The
/// window shrinks to the largest odd side that fits smaller images.
pub fn ssim_index(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w) = (a.height(), a.width());
    let taps = gaussian_window(ssim_window_for(h, w), SSIM_SIGMA);
    let s = local_stats(&to_f64(a), &to_f64(b), h, w, &taps);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = s.mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
            ((2.0 * ma * mb + c1) * (2.0 * s.cov[i] + c2))
                / ((ma * ma + mb * mb + c1) * (s.var_a[i] + s.var_b[i] + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Mean of `SSIM(fused, a)` and `SSIM(fused, b)`.
pub fn fusion_ssim(fused: &Image, a: &Image, b: &Image) -> Result<f64> {
    Ok(0.5 * (ssim_index(fused, a)? + ssim_index(fused, b)?))
}

// ---- visual information fidelity ---------------------------------------------

/// Pixel-domain visual information fidelity of `distorted` against
/// `reference`.
///
/// Both images are scaled to `[0, 255]`. At each of four scales local
/// statistics come from a 3x3 Gaussian window (sigma 0.6, valid region);
/// between scales the planes are filtered with the same window and
/// decimated by two. The result is the ratio of the summed information the
/// distorted image carries to the information in the reference.
pub fn vif(distorted: &Image, reference: &Image) -> Result<f64> {
    distorted.check_same_shape(reference)?;
    let (mut h, mut w) = (reference.height(), reference.width());
    if h < VIF_MIN_SIDE || w < VIF_MIN_SIDE {
        return Err(FuseError::Invalid(format!(
            "vif needs at least {VIF_MIN_SIDE}x{VIF_MIN_SIDE}, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(3, 0.6);
    let mut r: Vec<f64> = to_f64(reference).iter().map(|v| v * 255.0).collect();
    let mut d: Vec<f64> = to_f64(distorted).iter().map(|v| v * 255.0).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 0..VIF_SCALES {
        if scale > 0 {
            let (rf, fh, fw) = filter_valid(&r, h, w, &taps);
            let (df, _, _) = filter_valid(&d, h, w, &taps);
            let (nh, nw) = (fh.div_ceil(2), fw.div_ceil(2));
            let decimate = |p: &[f64]| -> Vec<f64> {
                (0..nh)
                    .flat_map(|y| (0..nw).map(move |x| (y, x)))
                    .map(|(y, x)| p[2 * y * fw + 2 * x])
                    .collect()
            };
            r = decimate(&rf);
            d = decimate(&df);
            h = nh;
            w = nw;
        }
        let s = local_stats(&r, &d, h, w, &taps);
        for i in 0..s.mu_a.len() {
            let mut s1 = s.var_a[i].max(0.0);
            let s2 = s.var_b[i].max(0.0);
            let s12 = s.cov[i];
            let mut g = s12 / (s1 + 1e-10);
            let mut sv = s2 - g * s12;
            if s1 < 1e-10 {
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            }
            if s2 < 1e-10 {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(1e-10);
            num += (1.0 + g * g * s1 / (sv + VIF_NOISE_VAR)).log10();
            den += (1.0 + s1 / VIF_NOISE_VAR).log10();
        }
    }
    if den == 0.0 {
        return Ok(if num == 0.0 { 1.0 } else { 0.0 });
    }
    Ok(num / den)
}

/// Mean of `vif(fused, a)` and `vif(fused, b)`.
pub fn fusion_vif(fused: &Image, a: &Image, b: &Image) -> Result<f64> {
    Ok(0.5 * (vif(fused, a)? + vif(fused, b)?))
}

// ---- edge preservation ---------------------------------------------------------

/// Horizontal and vertical 3x3 Sobel responses with replicated borders.
pub fn sobel_components(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (img.height(), img.width());
    let p = to_f64(img);
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        p[yy * w + xx]
    };
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            gy[i] = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        }
    }
    (gx, gy)
}

const QG: (f64, f64, f64) = (0.9994, -15.0, 0.5);
const QA: (f64, f64, f64) = (0.9879, -22.0, 0.8);

fn strength_orientation(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (gx, gy) = sobel_components(img);
    let g = gx.iter().zip(&gy).map(|(x, y)| (x * x + y * y).sqrt()).collect();
    let a = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| if x == 0.0 { FRAC_PI_2 } else { (y / x).atan() })
        .collect();
    (g, a)
}

fn preservation(gs: f64, as_: f64, gf: f64, af: f64) -> f64 {
    let g = if gs == gf {
        1.0
    } else if gs > gf {
        gf / gs
    } else {
        gs / gf
    };
    let a = 1.0 - (as_ - af).abs() / FRAC_PI_2;
    let qg = QG.0 / (1.0 + (QG.1 * (g - QG.2)).exp());
    let qa = QA.0 / (1.0 + (QA.1 * (a - QA.2)).exp());
    qg * qa
}

/// Edge-information preservation of `fused` with respect to both sources,
/// weighted by source edge strength. Zero if neither source has any edge.
pub fn qabf(fused: &Image, a: &Image, b: &Image) -> Result<f64> {
    fused.check_same_shape(a)?;
    fused.check_same_shape(b)?;
    let (gf, af) = strength_orientation(fused);
    let (ga, aa) = strength_orientation(a);
    let (gb, ab) = strength_orientation(b);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..gf.len() {
        let (wa, wb) = (ga[i], gb[i]);
        if wa == 0.0 && wb == 0.0 {
            continue;
        }
        num += preservation(ga[i], aa[i], gf[i], af[i]) * wa + preservation(gb[i], ab[i], gf[i], af[i]) * wb;
        den += wa + wb;
    }
    Ok(if den == 0.0 { 0.0 } else { (num / den).clamp(0.0, 1.0) })
}

// ---- feature mutual information -------------------------------------------------

/// Feature spaces compared by [`fmi`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmiFeature {
    Pixel,
    /// Orthonormal type-II DCT coefficients of each full 8x8 block.
    Dct,
    /// One-level orthonormal Haar detail coefficients (LH, HL, HH).
    Wavelet,
}

impl std::str::FromStr for FmiFeature {
    type Err = FuseError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pixel" => Ok(Self::Pixel),
            "dct" => Ok(Self::Dct),
            "wavelet" | "w" | "haar" => Ok(Self::Wavelet),
            _ => Err(FuseError::Invalid(format!("unknown fmi feature '{s}'"))),
        }
    }
}

/// 8x8 orthonormal DCT-II coefficients of every full block, block by block.
pub fn dct_features(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let p = to_f64(img);
    let basis: Vec<f64> = (0..8)
        .flat_map(|u| {
            (0..8).map(move |x| {
                let s = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
                s * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos()
            })
        })
        .collect();
    let mut out = Vec::with_capacity((h / 8) * (w / 8) * 64);
    for by in 0..h / 8 {
        for bx in 0..w / 8 {
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for y in 0..8 {
                        for x in 0..8 {
                            acc += basis[u * 8 + y] * basis[v * 8 + x] * p[(by * 8 + y) * w + bx * 8 + x];
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

/// One-level Haar detail coefficients: all LH, then HL, then HH.
pub fn haar_features(img: &Image) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let p = to_f64(img);
    let mut bands = [Vec::new(), Vec::new(), Vec::new()];
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let a = p[2 * y * w + 2 * x];
            let b = p[2 * y * w + 2 * x + 1];
            let c = p[(2 * y + 1) * w + 2 * x];
            let d = p[(2 * y + 1) * w + 2 * x + 1];
            bands[0].push((a + b - c - d) / 2.0);
            bands[1].push((a - b + c - d) / 2.0);
            bands[2].push((a - b - c + d) / 2.0);
        }
    }
    bands.concat()
}

/// Min-max scaling to `[0, 1]`; a constant map becomes all zeros.
fn unit_range(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        v.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// `2 MI / (H(a) + H(b))` of two feature maps after min-max scaling; zero
/// when both maps are constant.
pub fn feature_nmi(a: &[f64], b: &[f64]) -> f64 {
    let (ha, hb, hab) = entropies(&unit_range(a), &unit_range(b), BINS);
    if ha + hb == 0.0 {
        0.0
    } else {
        (2.0 * (ha + hb - hab) / (ha + hb)).clamp(0.0, 1.0)
    }
}

fn features(img: &Image, kind: FmiFeature) -> Vec<f64> {
    match kind {
        FmiFeature::Pixel => to_f64(img),
        FmiFeature::Dct => dct_features(img),
        FmiFeature::Wavelet => haar_features(img),
    }
}

/// Feature mutual information: normalized MI between fused and source
/// features, averaged over the two sources.
pub fn fmi(fused: &Image, a: &Image, b: &Image, kind: FmiFeature) -> Result<f64> {
    fused.check_same_shape(a)?;
    fused.check_same_shape(b)?;
    if fused.height() < FMI_MIN_SIDE || fused.width() < FMI_MIN_SIDE {
        return Err(FuseError::Invalid(format!("fmi needs at least {FMI_MIN_SIDE}x{FMI_MIN_SIDE}")));
    }
    let ff = features(fused, kind);
    Ok(0.5 * (feature_nmi(&ff, &features(a, kind)) + feature_nmi(&ff, &features(b, kind))))
}

// ---- reports ---------------------------------------------------------------------

/// A table of per-item metric rows with column means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub columns: Vec<String>,
    /// `(item id, values in column order)`.
    pub rows: Vec<(String, Vec<f64>)>,
    pub metadata: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, id: impl Into<String>, values: Vec<f64>) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(FuseError::Shape(format!(
                "row has {} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(FuseError::Invalid(format!("non-finite metric value {v}")));
        }
        self.rows.push((id.into(), values));
        Ok(())
    }

    /// Arithmetic mean of each column (empty report: all zeros).
    pub fn means(&self) -> Vec<f64> {
        let n = self.rows.len().max(1) as f64;
        (0..self.columns.len())
            .map(|c| self.rows.iter().map(|(_, v)| v[c]).sum::<f64>() / n)
            .collect()
    }

    pub fn mean_of(&self, column: &str) -> Option<f64> {
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.means()[c])
    }

    pub fn column(&self, column: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|x| x == column)?;
        Some(self.rows.iter().map(|(_, v)| v[c]).collect())
    }

    /// Header line, one line per row, then a `mean` line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("id,{}\n", self.columns.join(","));
        let line = |s: &mut String, id: &str, v: &[f64]| {
            let vals: Vec<String> = v.iter().map(|x| format!("{x:.17e}")).collect();
            let _ = writeln!(s, "{id},{}", vals.join(","));
        };
        for (id, v) in &self.rows {
            line(&mut s, id, v);
        }
        line(&mut s, "mean", &self.means());
        s
    }

    /// Parses the output of [`MetricReport::to_csv`]; the `mean` line is
    /// recomputed rather than read.
    pub fn from_csv(name: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| FuseError::Format("empty report".into()))?;
        let mut cols = header.split(',');
        if cols.next() != Some("id") {
            return Err(FuseError::Format("report header must start with 'id'".into()));
        }
        let columns: Vec<&str> = cols.collect();
        let mut report = Self::new(name, &columns);
        for l in lines {
            let mut parts = l.split(',');
            let id = parts.next().unwrap_or_default();
            if id == "mean" {
                continue;
            }
            let values = parts
                .map(|p| p.trim().parse::<f64>().map_err(|e| FuseError::Format(format!("bad value '{p}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            report.push(id, values)?;
        }
        Ok(report)
    }

    /// `key=value` lines: metadata, then `mean.<column>`, then
    /// `<id>.<column>` for every row.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("report={}\n", self.name);
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "meta.{k}={v}");
        }
        for (c, m) in self.columns.iter().zip(self.means()) {
            let _ = writeln!(s, "mean.{c}={m:.17e}");
        }
        for (id, v) in &self.rows {
            for (c, x) in self.columns.iter().zip(v) {
                let _ = writeln!(s, "{id}.{c}={x:.17e}");
            }
        }
        s
    }
}

/// MI, NMI and CC of `registered` against `fixed`.
pub fn registration_metrics(registered: &Image, fixed: &Image) -> Result<Vec<f64>> {
    Ok(vec![
        mutual_information(registered, fixed, BINS)?,
        normalized_mutual_information(registered, fixed)?,
        normalized_cross_correlation(registered, fixed)?,
    ])
}

/// All fusion metrics in [`FUSION_COLUMNS`] order.
pub fn fusion_metrics(fused: &Image, a: &Image, b: &Image) -> Result<Vec<f64>> {
    Ok(vec![
        fusion_mi(fused, a, b)?,
        fusion_vif(fused, a, b)?,
        qabf(fused, a, b)?,
        spatial_frequency(fused),
        fusion_ssim(fused, a, b)?,
        fmi(fused, a, b, FmiFeature::Pixel)?,
        fmi(fused, a, b, FmiFeature::Dct)?,
        fmi(fused, a, b, FmiFeature::Wavelet)?,
    ])
}

/// Registration scores of PAT images warped by `fields` against the MRI of
/// each pair (`"registered"` report) and of the unwarped PAT images
/// (`"misaligned"` report).
pub fn evaluate_registration(pairs: &[PhantomPair], fields: &[DeformationField]) -> Result<(MetricReport, MetricReport)> {
    if pairs.len() != fields.len() {
        return Err(FuseError::Shape(format!("{} pairs but {} fields", pairs.len(), fields.len())));
    }
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = with_workers(|| {
        pairs
            .par_iter()
            .zip(fields)
            .map(|(p, f)| {
                let registered = warpfield::warp(&p.pat, f)?;
                Ok((registration_metrics(&registered, &p.mri)?, registration_metrics(&p.pat, &p.mri)?))
            })
            .collect()
    });
    let mut reg = MetricReport::new("registered", &REGISTRATION_COLUMNS);
    let mut base = MetricReport::new("misaligned", &REGISTRATION_COLUMNS);
    for (p, r) in pairs.iter().zip(rows) {
        let (r, b) = r?;
        reg.push(format!("pair{}", p.seed), r)?;
        base.push(format!("pair{}", p.seed), b)?;
    }
    Ok((reg, base))
}

/// Fusion scores of each fused image against its two sources.
pub fn evaluate_fusion(fused: &[Image], sources: &[(Image, Image)]) -> Result<MetricReport> {
    if fused.len() != sources.len() {
        return Err(FuseError::Shape(format!("{} fused images but {} source pairs", fused.len(), sources.len())));
    }
    let rows: Vec<Result<Vec<f64>>> = with_workers(|| {
        fused
            .par_iter()
            .zip(sources)
            .map(|(f, (a, b))| fusion_metrics(f, a, b))
            .collect()
    });
    let mut report = MetricReport::new("fusion", &FUSION_COLUMNS);
    for (i, r) in rows.into_iter().enumerate() {
        report.push(format!("img{i}"), r?)?;
    }
    Ok(report)
}
