//! Dual-branch feature decomposition fusion network and its losses.
//!
//! A shallow feature encoder (channel-attention transformer blocks) feeds a
//! base branch (spatial-attention blocks with a convolutional side path)
//! and a detail branch (invertible affine couplings). The fusion layers
//! merge base and detail features of the two modalities separately and a
//! decoder maps the merged features back to an image. During the first
//! training stage the decoder instead reconstructs each input from its own
//! features.

use std::cell::RefCell;

use fusekit_autograd::{concat, Conv2dSpec, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{FuseError, Result};
use crate::imagedata::{Image, Modality};
use crate::params::{Binder, Init, ParamStore};
use crate::perceptual::PerceptualNet;
use crate::regnet;
use crate::warpfield::sobel_var;

/// Parameter-name prefix of the shallow, base and detail encoders.
pub const ENCODER: &str = "fuse.enc.";
/// Parameter-name prefix of the base and detail fusion layers.
pub const FUSION: &str = "fuse.fusion.";
/// Parameter-name prefix of the decoder.
pub const DECODER: &str = "fuse.dec.";

/// Epsilon of the channel layer norm.
pub const LN_EPS: f64 = 1e-5;
/// Bound applied to the log-scale of each coupling.
pub const LOG_SCALE_CLAMP: f64 = 5.0;
/// Offset keeping the denominator of the decomposition loss positive.
pub const DECOMP_EPS: f64 = 1.01;
/// SSIM weight in the reconstruction loss.
pub const DEFAULT_MU: f64 = 5.0;
/// SSIM window side.
pub const SSIM_WINDOW: usize = 11;
/// SSIM Gaussian standard deviation.
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Architecture of the fusion network.
#[derive(Clone, Debug, PartialEq)]
pub struct FuseNetConfig {
    /// Feature channels `C`.
    pub dim: usize,
    /// Attention heads; must divide `dim` (and `dim / 2` for the base branch).
    pub heads: usize,
    /// Transformer blocks in the shallow encoder.
    pub encoder_blocks: usize,
    /// Spatial-attention blocks in the base encoder.
    pub base_blocks: usize,
    /// Coupling layers in the detail encoder.
    pub inn_layers: usize,
    /// Transformer blocks in the decoder.
    pub decoder_blocks: usize,
    /// Hidden width multiplier of the feed-forward sublayers.
    pub ffn_expansion: usize,
    /// Hidden width multiplier of the coupling sub-networks.
    pub inn_expansion: usize,
    /// Keys and values of spatial attention are average-pooled by this factor.
    pub kv_pool: usize,
}

impl Default for FuseNetConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 8,
            encoder_blocks: 4,
            base_blocks: 1,
            inn_layers: 2,
            decoder_blocks: 4,
            ffn_expansion: 2,
            inn_expansion: 2,
            kv_pool: 4,
        }
    }
}

/// Shallow, base and detail features of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Decomposed<'t, T: Real> {
    pub shallow: Var<'t, T>,
    pub base: Var<'t, T>,
    pub detail: Var<'t, T>,
}

type Probe<T> = RefCell<Vec<Tensor<T>>>;

/// Binder plus an optional sink for attention maps.
struct Ctx<'a, 't, 's, T: Real> {
    b: &'a Binder<'t, 's, T>,
    probe: Option<&'a Probe<T>>,
}

impl<'t, T: Real> Ctx<'_, 't, '_, T> {
    fn conv(&self, name: &str, x: Var<'t, T>, spec: Conv2dSpec) -> Var<'t, T> {
        self.b.conv(name, x, spec)
    }

    fn record(&self, attn: Var<'t, T>) {
        if let Some(p) = self.probe {
            p.borrow_mut().push((*attn.value()).clone());
        }
    }

    fn layer_norm(&self, name: &str, x: Var<'t, T>) -> Var<'t, T> {
        self.b.channel_affine(name, x.channel_norm(LN_EPS))
    }
}

fn l2_normalize_last<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    let norm = x.square().sum_axis(x.shape().len() - 1, true).add_scalar(1e-12).sqrt();
    x.div(norm)
}

/// The fusion network architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct FuseNet {
    pub cfg: FuseNetConfig,
}

impl FuseNet {
    pub fn new(cfg: FuseNetConfig) -> Result<Self> {
        let c = cfg.dim;
        if c < 2 || !c.is_multiple_of(2) {
            return Err(FuseError::Invalid(format!("fusion width {c} must be even")));
        }
        if cfg.heads == 0 || !c.is_multiple_of(cfg.heads) || !(c / 2).is_multiple_of(cfg.heads) {
            return Err(FuseError::Invalid(format!(
                "{} heads do not divide widths {c} and {}",
                cfg.heads,
                c / 2
            )));
        }
        if cfg.kv_pool == 0 || cfg.ffn_expansion == 0 || cfg.inn_expansion == 0 {
            return Err(FuseError::Invalid("expansion and pooling factors must be >= 1".into()));
        }
        Ok(Self { cfg })
    }

    // ---- initialization -------------------------------------------------

    fn init_restormer<T: Real, R: Rng>(&self, init: &mut Init<'_, T, R>, p: &str) {
        let c = self.cfg.dim;
        let hid = c * self.cfg.ffn_expansion;
        init.affine(&format!("{p}.norm1"), c);
        init.conv(&format!("{p}.attn.qkv"), 3 * c, c, 1, false);
        init.conv(&format!("{p}.attn.qkv_dw"), 3 * c, 1, 3, false);
        init.tensor(&format!("{p}.attn.temperature"), Tensor::ones(&[self.cfg.heads]));
        init.conv(&format!("{p}.attn.proj"), c, c, 1, false);
        init.affine(&format!("{p}.norm2"), c);
        init.conv(&format!("{p}.ffn.in"), 2 * hid, c, 1, false);
        init.conv(&format!("{p}.ffn.dw"), 2 * hid, 1, 3, false);
        init.conv(&format!("{p}.ffn.out"), c, hid, 1, false);
    }

    fn init_lite<T: Real, R: Rng>(&self, init: &mut Init<'_, T, R>, p: &str) {
        let c = self.cfg.dim;
        let half = c / 2;
        let hid = c * self.cfg.ffn_expansion;
        init.affine(&format!("{p}.norm1"), c);
        init.conv(&format!("{p}.attn.q"), half, half, 1, true);
        init.conv(&format!("{p}.attn.kv"), 2 * half, half, 1, true);
        init.conv(&format!("{p}.attn.proj"), half, half, 1, true);
        init.conv(&format!("{p}.local.dw"), half, 1, 3, true);
        init.conv(&format!("{p}.local.pw"), half, half, 1, true);
        init.affine(&format!("{p}.norm2"), c);
        init.conv(&format!("{p}.ffn.in"), hid, c, 1, true);
        init.conv(&format!("{p}.ffn.out"), c, hid, 1, true);
    }

    fn init_bottleneck<T: Real, R: Rng>(&self, init: &mut Init<'_, T, R>, p: &str, c: usize) {
        let hid = c * self.cfg.inn_expansion;
        init.conv(&format!("{p}.expand"), hid, c, 1, false);
        init.conv(&format!("{p}.dw"), hid, 1, 3, false);
        init.conv(&format!("{p}.project"), c, hid, 1, false);
    }

    fn init_coupling<T: Real, R: Rng>(&self, init: &mut Init<'_, T, R>, p: &str, channels: usize) {
        let c = channels / 2;
        for f in ["shift_lo", "log_scale", "shift_hi"] {
            self.init_bottleneck(init, &format!("{p}.{f}"), c);
        }
    }

    pub fn init<T: Real, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        let c = self.cfg.dim;
        init.conv(&format!("{ENCODER}stem"), c, 1, 3, false);
        for i in 0..self.cfg.encoder_blocks {
            self.init_restormer(init, &format!("{ENCODER}shallow{i}"));
        }
        for i in 0..self.cfg.base_blocks {
            self.init_lite(init, &format!("{ENCODER}base{i}"));
        }
        for i in 0..self.cfg.inn_layers {
            self.init_coupling(init, &format!("{ENCODER}detail{i}"), c);
        }
        init.conv(&format!("{FUSION}base.reduce"), c, 2 * c, 1, true);
        self.init_lite(init, &format!("{FUSION}base.block"));
        self.init_coupling(init, &format!("{FUSION}detail.inn"), 2 * c);
        init.conv(&format!("{FUSION}detail.reduce"), c, 2 * c, 1, true);
        init.conv(&format!("{DECODER}reduce"), c, 2 * c, 1, true);
        for i in 0..self.cfg.decoder_blocks {
            self.init_restormer(init, &format!("{DECODER}block{i}"));
        }
        init.conv(&format!("{DECODER}out1"), c / 2, c, 3, true);
        init.conv(&format!("{DECODER}out2"), 1, c / 2, 3, true);
    }

    // ---- blocks ---------------------------------------------------------

    /// Channel ("transposed") multi-head attention followed by a gated
    /// depthwise feed-forward sublayer, both pre-normalized and residual.
    fn restormer<'t, T: Real>(&self, ctx: &Ctx<'_, 't, '_, T>, p: &str, x: Var<'t, T>) -> Var<'t, T> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let heads = self.cfg.heads;
        let d = c / heads;

        let y = ctx.layer_norm(&format!("{p}.norm1"), x);
        let qkv = ctx.conv(&format!("{p}.attn.qkv"), y, Conv2dSpec::new(1, 0));
        let qkv = ctx.conv(
            &format!("{p}.attn.qkv_dw"),
            qkv,
            Conv2dSpec::same(3).with_groups(3 * c),
        );
        let parts = qkv.split(1, &[c, c, c]);
        let to_heads = |v: Var<'t, T>| v.reshape(&[n, heads, d, h * w]);
        let q = l2_normalize_last(to_heads(parts[0]));
        let k = l2_normalize_last(to_heads(parts[1]));
        let v = to_heads(parts[2]);
        let temp = ctx.b.get(&format!("{p}.attn.temperature")).reshape(&[1, heads, 1, 1]);
        let attn = q.matmul_t(k).mul(temp).softmax_last();
        ctx.record(attn);
        let out = attn.matmul(v).reshape(&[n, c, h, w]);
        let x = x.add(ctx.conv(&format!("{p}.attn.proj"), out, Conv2dSpec::new(1, 0)));

        let y = ctx.layer_norm(&format!("{p}.norm2"), x);
        let hid = c * self.cfg.ffn_expansion;
        let g = ctx.conv(&format!("{p}.ffn.in"), y, Conv2dSpec::new(1, 0));
        let g = ctx.conv(&format!("{p}.ffn.dw"), g, Conv2dSpec::same(3).with_groups(2 * hid));
        let gates = g.split(1, &[hid, hid]);
        let gated = gates[0].gelu().mul(gates[1]);
        x.add(ctx.conv(&format!("{p}.ffn.out"), gated, Conv2dSpec::new(1, 0)))
    }

    /// Half of the channels go through spatial multi-head attention with
    /// pooled keys and values, the other half through a depthwise and a
    /// pointwise convolution; then a feed-forward sublayer.
    fn lite<'t, T: Real>(&self, ctx: &Ctx<'_, 't, '_, T>, p: &str, x: Var<'t, T>) -> Var<'t, T> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let half = c / 2;
        let heads = self.cfg.heads;
        let d = half / heads;

        let y = ctx.layer_norm(&format!("{p}.norm1"), x);
        let halves = y.split(1, &[half, half]);
        let (ga, lo) = (halves[0], halves[1]);

        let q = ctx
            .conv(&format!("{p}.attn.q"), ga, Conv2dSpec::new(1, 0))
            .reshape(&[n, heads, d, h * w])
            .permute(&[0, 1, 3, 2]);
        let pool = self.cfg.kv_pool.min(h).min(w).max(1);
        let pooled = ga.avg_pool2d(pool);
        let l = pooled.shape()[2] * pooled.shape()[3];
        let kv = ctx.conv(&format!("{p}.attn.kv"), pooled, Conv2dSpec::new(1, 0));
        let kv = kv.split(1, &[half, half]);
        let k = kv[0].reshape(&[n, heads, d, l]);
        let v = kv[1].reshape(&[n, heads, d, l]);
        let attn = q.matmul(k).mul_scalar(1.0 / (d as f64).sqrt()).softmax_last();
        ctx.record(attn);
        let global = attn
            .matmul_t(v)
            .permute(&[0, 1, 3, 2])
            .reshape(&[n, half, h, w]);
        let global = ctx.conv(&format!("{p}.attn.proj"), global, Conv2dSpec::new(1, 0));

        let local = ctx.conv(&format!("{p}.local.dw"), lo, Conv2dSpec::same(3).with_groups(half));
        let local = ctx.conv(&format!("{p}.local.pw"), local.gelu(), Conv2dSpec::new(1, 0));
        let x = x.add(concat(&[global, local], 1));

        let y = ctx.layer_norm(&format!("{p}.norm2"), x);
        let f = ctx.conv(&format!("{p}.ffn.in"), y, Conv2dSpec::new(1, 0)).gelu();
        x.add(ctx.conv(&format!("{p}.ffn.out"), f, Conv2dSpec::new(1, 0)))
    }

    /// Inverted bottleneck: expand, depthwise 3x3, project; ReLU6 between.
    fn bottleneck<'t, T: Real>(&self, b: &Binder<'t, '_, T>, p: &str, x: Var<'t, T>) -> Var<'t, T> {
        let hid = x.shape()[1] * self.cfg.inn_expansion;
        let h = b.conv(&format!("{p}.expand"), x, Conv2dSpec::new(1, 0)).relu6();
        let h = b
            .conv(&format!("{p}.dw"), h, Conv2dSpec::same(3).with_groups(hid))
            .relu6();
        b.conv(&format!("{p}.project"), h, Conv2dSpec::new(1, 0))
    }

    /// One affine coupling: `hi += shift_lo(lo)`, then
    /// `lo = lo * exp(clamp(log_scale(hi))) + shift_hi(hi)`.
    pub fn coupling_forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, p: &str, x: Var<'t, T>) -> Var<'t, T> {
        let c = x.shape()[1] / 2;
        let parts = x.split(1, &[c, c]);
        let (lo, hi) = (parts[0], parts[1]);
        let hi = hi.add(self.bottleneck(b, &format!("{p}.shift_lo"), lo));
        let s = self
            .bottleneck(b, &format!("{p}.log_scale"), hi)
            .clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
        let lo = lo.mul(s.exp()).add(self.bottleneck(b, &format!("{p}.shift_hi"), hi));
        concat(&[lo, hi], 1)
    }

    /// Exact inverse of [`FuseNet::coupling_forward`].
    pub fn coupling_inverse<'t, T: Real>(&self, b: &Binder<'t, '_, T>, p: &str, y: Var<'t, T>) -> Var<'t, T> {
        let c = y.shape()[1] / 2;
        let parts = y.split(1, &[c, c]);
        let (lo, hi) = (parts[0], parts[1]);
        let s = self
            .bottleneck(b, &format!("{p}.log_scale"), hi)
            .clamp(-LOG_SCALE_CLAMP, LOG_SCALE_CLAMP);
        let lo = lo
            .sub(self.bottleneck(b, &format!("{p}.shift_hi"), hi))
            .mul(s.neg().exp());
        let hi = hi.sub(self.bottleneck(b, &format!("{p}.shift_lo"), lo));
        concat(&[lo, hi], 1)
    }

    // ---- encoder / fusion / decoder -------------------------------------

    fn feature_encode_ctx<'t, T: Real>(&self, ctx: &Ctx<'_, 't, '_, T>, img: Var<'t, T>) -> Var<'t, T> {
        let mut h = ctx.conv(&format!("{ENCODER}stem"), img, Conv2dSpec::same(3));
        for i in 0..self.cfg.encoder_blocks {
            h = self.restormer(ctx, &format!("{ENCODER}shallow{i}"), h);
        }
        h
    }

    fn base_encode_ctx<'t, T: Real>(&self, ctx: &Ctx<'_, 't, '_, T>, shallow: Var<'t, T>) -> Var<'t, T> {
        let mut h = shallow;
        for i in 0..self.cfg.base_blocks {
            h = self.lite(ctx, &format!("{ENCODER}base{i}"), h);
        }
        h
    }

    /// `[N, 1, H, W]` image batch to `[N, C, H, W]` shallow features.
    pub fn feature_encode<'t, T: Real>(&self, b: &Binder<'t, '_, T>, img: Var<'t, T>) -> Var<'t, T> {
        self.feature_encode_ctx(&Ctx { b, probe: None }, img)
    }

    /// Shallow features and every channel-attention map computed on the way.
    pub fn feature_encode_with_attention<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        img: Var<'t, T>,
    ) -> (Var<'t, T>, Vec<Tensor<T>>) {
        let probe = RefCell::new(Vec::new());
        let out = self.feature_encode_ctx(&Ctx { b, probe: Some(&probe) }, img);
        (out, probe.into_inner())
    }

    pub fn base_encode<'t, T: Real>(&self, b: &Binder<'t, '_, T>, shallow: Var<'t, T>) -> Var<'t, T> {
        self.base_encode_ctx(&Ctx { b, probe: None }, shallow)
    }

    pub fn base_encode_with_attention<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        shallow: Var<'t, T>,
    ) -> (Var<'t, T>, Vec<Tensor<T>>) {
        let probe = RefCell::new(Vec::new());
        let out = self.base_encode_ctx(&Ctx { b, probe: Some(&probe) }, shallow);
        (out, probe.into_inner())
    }

    pub fn detail_encode<'t, T: Real>(&self, b: &Binder<'t, '_, T>, shallow: Var<'t, T>) -> Var<'t, T> {
        (0..self.cfg.inn_layers).fold(shallow, |h, i| {
            self.coupling_forward(b, &format!("{ENCODER}detail{i}"), h)
        })
    }

    /// Recovers shallow features from detail features.
    pub fn detail_encode_inverse<'t, T: Real>(&self, b: &Binder<'t, '_, T>, detail: Var<'t, T>) -> Var<'t, T> {
        (0..self.cfg.inn_layers).rev().fold(detail, |h, i| {
            self.coupling_inverse(b, &format!("{ENCODER}detail{i}"), h)
        })
    }

    pub fn decompose<'t, T: Real>(&self, b: &Binder<'t, '_, T>, img: Var<'t, T>) -> Decomposed<'t, T> {
        let shallow = self.feature_encode(b, img);
        Decomposed {
            shallow,
            base: self.base_encode(b, shallow),
            detail: self.detail_encode(b, shallow),
        }
    }

    /// Concatenate, reduce to `C` channels, one spatial-attention block.
    pub fn fuse_base<'t, T: Real>(&self, b: &Binder<'t, '_, T>, bp: Var<'t, T>, bm: Var<'t, T>) -> Var<'t, T> {
        let ctx = Ctx { b, probe: None };
        let h = ctx.conv(&format!("{FUSION}base.reduce"), concat(&[bp, bm], 1), Conv2dSpec::new(1, 0));
        self.lite(&ctx, &format!("{FUSION}base.block"), h)
    }

    /// Concatenate, one coupling over `2C` channels, reduce to `C`.
    pub fn fuse_detail<'t, T: Real>(&self, b: &Binder<'t, '_, T>, dp: Var<'t, T>, dm: Var<'t, T>) -> Var<'t, T> {
        let h = self.coupling_forward(b, &format!("{FUSION}detail.inn"), concat(&[dp, dm], 1));
        b.conv(&format!("{FUSION}detail.reduce"), h, Conv2dSpec::new(1, 0))
    }

    /// Base and detail features to an `[N, 1, H, W]` image in `(0, 1)`.
    pub fn decode<'t, T: Real>(&self, b: &Binder<'t, '_, T>, base: Var<'t, T>, detail: Var<'t, T>) -> Var<'t, T> {
        let ctx = Ctx { b, probe: None };
        let mut h = ctx.conv(&format!("{DECODER}reduce"), concat(&[base, detail], 1), Conv2dSpec::new(1, 0));
        for i in 0..self.cfg.decoder_blocks {
            h = self.restormer(&ctx, &format!("{DECODER}block{i}"), h);
        }
        let h = ctx.conv(&format!("{DECODER}out1"), h, Conv2dSpec::same(3)).leaky_relu(0.01);
        ctx.conv(&format!("{DECODER}out2"), h, Conv2dSpec::same(3)).sigmoid()
    }

    /// Encodes and decodes one modality on its own.
    pub fn reconstruct<'t, T: Real>(&self, b: &Binder<'t, '_, T>, img: Var<'t, T>) -> (Decomposed<'t, T>, Var<'t, T>) {
        let d = self.decompose(b, img);
        let recon = self.decode(b, d.base, d.detail);
        (d, recon)
    }

    /// Fuses an aligned PAT/MRI batch.
    pub fn fuse<'t, T: Real>(&self, b: &Binder<'t, '_, T>, pat: Var<'t, T>, mri: Var<'t, T>) -> FusionOutput<'t, T> {
        let dp = self.decompose(b, pat);
        let dm = self.decompose(b, mri);
        let base = self.fuse_base(b, dp.base, dm.base);
        let detail = self.fuse_detail(b, dp.detail, dm.detail);
        FusionOutput {
            fused: self.decode(b, base, detail),
            pat: dp,
            mri: dm,
        }
    }
}

/// The fused batch and the decompositions it came from.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput<'t, T: Real> {
    pub fused: Var<'t, T>,
    pub pat: Decomposed<'t, T>,
    pub mri: Decomposed<'t, T>,
}

// ---- losses -------------------------------------------------------------

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over valid windows of two `[N, 1, H, W]` batches.
pub fn ssim_var<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let tape = a.tape();
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let gv: Vec<T> = g.iter().map(|&v| T::lit(v)).collect();
    let kv = tape.constant(Tensor::new(&[1, 1, SSIM_WINDOW, 1], gv.clone()));
    let kh = tape.constant(Tensor::new(&[1, 1, 1, SSIM_WINDOW], gv));
    let blur = |x: Var<'t, T>| {
        x.conv2d(kv, None, Conv2dSpec::new(1, 0))
            .conv2d(kh, None, Conv2dSpec::new(1, 0))
    };
    let (c1, c2) = ((SSIM_K1).powi(2), (SSIM_K2).powi(2));
    let mu_a = blur(a);
    let mu_b = blur(b);
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(mu_b);
    let var_a = blur(a.square()).sub(mu_aa);
    let var_b = blur(b.square()).sub(mu_bb);
    let cov = blur(a.mul(b)).sub(mu_ab);
    let num = mu_ab.mul_scalar(2.0).add_scalar(c1).mul(cov.mul_scalar(2.0).add_scalar(c2));
    let den = mu_aa.add(mu_bb).add_scalar(c1).mul(var_a.add(var_b).add_scalar(c2));
    num.div(den).mean_all()
}

/// `mean((a - b)^2) + mu * (1 - ssim(a, b))`.
pub fn reconstruction_loss_var<'t, T: Real>(orig: Var<'t, T>, recon: Var<'t, T>, mu: f64) -> Var<'t, T> {
    let mse = orig.sub(recon).square().mean_all();
    let ssim = ssim_var(orig, recon);
    mse.add(ssim.neg().add_scalar(1.0).mul_scalar(mu))
}

/// Pearson correlation of each batch item over all its elements, averaged
/// over the batch.
pub fn correlation_var<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    let s = a.shape();
    let n = s[0];
    let m: usize = s[1..].iter().product();
    let a = a.reshape(&[n, m]);
    let b = b.reshape(&[n, m]);
    let ac = a.sub(a.mean_axis(1, true));
    let bc = b.sub(b.mean_axis(1, true));
    let num = ac.mul(bc).sum_axis(1, false);
    let den = ac
        .square()
        .sum_axis(1, false)
        .mul(bc.square().sum_axis(1, false))
        .add_scalar(1e-24)
        .sqrt();
    num.div(den).mean_all()
}

/// The decomposition loss with the two correlations it is built from.
#[derive(Clone, Copy, Debug)]
pub struct DecompTerms<'t, T: Real> {
    pub loss: Var<'t, T>,
    pub cc_base: Var<'t, T>,
    pub cc_detail: Var<'t, T>,
}

pub fn decomposition_terms_var<'t, T: Real>(
    bp: Var<'t, T>,
    bm: Var<'t, T>,
    dp: Var<'t, T>,
    dm: Var<'t, T>,
    eps: f64,
) -> DecompTerms<'t, T> {
    let cc_detail = correlation_var(dp, dm);
    let cc_base = correlation_var(bp, bm);
    DecompTerms {
        loss: cc_detail.square().div(cc_base.add_scalar(eps)),
        cc_base,
        cc_detail,
    }
}

/// `cc(detail_p, detail_m)^2 / (cc(base_p, base_m) + eps)`.
pub fn decomposition_loss_var<'t, T: Real>(
    bp: Var<'t, T>,
    bm: Var<'t, T>,
    dp: Var<'t, T>,
    dm: Var<'t, T>,
    eps: f64,
) -> Var<'t, T> {
    decomposition_terms_var(bp, bm, dp, dm, eps).loss
}

/// Mean absolute deviation of the fused image from the pixelwise maximum.
pub fn fusion_intensity_var<'t, T: Real>(fused: Var<'t, T>, pat: Var<'t, T>, mri: Var<'t, T>) -> Var<'t, T> {
    fused.sub(pat.maximum(mri)).abs().mean_all()
}

/// Mean absolute deviation of the fused Sobel magnitude from the pixelwise
/// maximum of the source magnitudes.
pub fn fusion_gradient_var<'t, T: Real>(fused: Var<'t, T>, pat: Var<'t, T>, mri: Var<'t, T>) -> Var<'t, T> {
    let target = sobel_var(pat).maximum(sobel_var(mri));
    sobel_var(fused).sub(target).abs().mean_all()
}

/// Weights of the fusion objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    /// MRI reconstruction weight in stage I.
    pub alpha1: f64,
    /// Decomposition weight in stage I.
    pub alpha2: f64,
    /// Gradient weight in stage II.
    pub alpha3: f64,
    /// Decomposition weight in stage II.
    pub alpha4: f64,
    pub mu: f64,
    pub eps: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 2.0,
            alpha3: 10.0,
            alpha4: 2.0,
            mu: DEFAULT_MU,
            eps: DECOMP_EPS,
        }
    }
}

/// Named terms of the stage-I fusion objective.
pub struct Stage1Terms<'t, T: Real> {
    pub rec_pat: Var<'t, T>,
    pub rec_mri: Var<'t, T>,
    pub decomp: DecompTerms<'t, T>,
    pub total: Var<'t, T>,
}

/// `rec(pat) + alpha1 rec(mri) + alpha2 decomp`.
pub fn stage1_fusion_loss_var<'t, T: Real>(
    pat: Var<'t, T>,
    mri: Var<'t, T>,
    pat_recon: Var<'t, T>,
    mri_recon: Var<'t, T>,
    dp: &Decomposed<'t, T>,
    dm: &Decomposed<'t, T>,
    w: &FusionWeights,
) -> Stage1Terms<'t, T> {
    let rec_pat = reconstruction_loss_var(pat, pat_recon, w.mu);
    let rec_mri = reconstruction_loss_var(mri, mri_recon, w.mu);
    let decomp = decomposition_terms_var(dp.base, dm.base, dp.detail, dm.detail, w.eps);
    let total = rec_pat
        .add(rec_mri.mul_scalar(w.alpha1))
        .add(decomp.loss.mul_scalar(w.alpha2));
    Stage1Terms {
        rec_pat,
        rec_mri,
        decomp,
        total,
    }
}

/// Named terms of the stage-II objective.
pub struct Stage2Terms<'t, T: Real> {
    pub reg: Var<'t, T>,
    pub intensity: Var<'t, T>,
    pub gradient: Var<'t, T>,
    pub decomp: DecompTerms<'t, T>,
    pub total: Var<'t, T>,
}

/// `reg + intensity + alpha3 gradient + alpha4 decomp`, with the
/// registration term supplied by the caller.
pub fn stage2_fusion_loss_var<'t, T: Real>(
    reg: Var<'t, T>,
    fusion: &FusionOutput<'t, T>,
    pat: Var<'t, T>,
    mri: Var<'t, T>,
    w: &FusionWeights,
) -> Stage2Terms<'t, T> {
    let intensity = fusion_intensity_var(fusion.fused, pat, mri);
    let gradient = fusion_gradient_var(fusion.fused, pat, mri);
    let decomp = decomposition_terms_var(
        fusion.pat.base,
        fusion.mri.base,
        fusion.pat.detail,
        fusion.mri.detail,
        w.eps,
    );
    let total = reg
        .add(intensity)
        .add(gradient.mul_scalar(w.alpha3))
        .add(decomp.loss.mul_scalar(w.alpha4));
    Stage2Terms {
        reg,
        intensity,
        gradient,
        decomp,
        total,
    }
}

/// Full stage-II objective with the registration loss computed from the
/// field and the pseudo-MRI / MRI pair.
#[allow(clippy::too_many_arguments)]
pub fn stage2_total_var<'t, T: Real>(
    perc: &PerceptualNet<T>,
    phi: Var<'t, T>,
    pseudo_mri: Var<'t, T>,
    real_mri: Var<'t, T>,
    fusion: &FusionOutput<'t, T>,
    registered_pat: Var<'t, T>,
    w: &FusionWeights,
    lambda_rev: f64,
    lambda_smooth: f64,
) -> Stage2Terms<'t, T> {
    let reg = regnet::registration_loss_var(perc, phi, pseudo_mri, real_mri, lambda_rev, lambda_smooth);
    stage2_fusion_loss_var(reg, fusion, registered_pat, real_mri, w)
}

// ---- image-level wrappers --------------------------------------------------

fn eval2(a: &Image, b: &Image, f: impl for<'t> Fn(Var<'t, f64>, Var<'t, f64>) -> Var<'t, f64>) -> Result<f64> {
    a.check_same_shape(b)?;
    let tape = Tape::new();
    Ok(f(tape.constant(a.to_tensor()), tape.constant(b.to_tensor())).item())
}

/// Mean SSIM; both sides must be at least 11x11.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if a.height() < SSIM_WINDOW || a.width() < SSIM_WINDOW {
        return Err(FuseError::Invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.height(),
            a.width()
        )));
    }
    eval2(a, b, ssim_var)
}

pub fn reconstruction_loss(orig: &Image, recon: &Image, mu: f64) -> Result<f64> {
    if orig.height() < SSIM_WINDOW || orig.width() < SSIM_WINDOW {
        return Err(FuseError::Invalid("reconstruction loss needs at least 11x11".into()));
    }
    eval2(orig, recon, |a, b| reconstruction_loss_var(a, b, mu))
}

/// Pearson correlation of two same-shaped tensors; an error if either is
/// constant.
pub fn correlation_coefficient(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(FuseError::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let n = a.numel() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(FuseError::Degenerate("correlation of a constant input".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// `cc(dp, dm)^2 / (cc(bp, bm) + eps)` on plain tensors.
pub fn decomposition_loss(bp: &Tensor<f64>, bm: &Tensor<f64>, dp: &Tensor<f64>, dm: &Tensor<f64>, eps: f64) -> Result<f64> {
    let cd = correlation_coefficient(dp, dm)?;
    let cb = correlation_coefficient(bp, bm)?;
    Ok(cd * cd / (cb + eps))
}

fn eval3(a: &Image, b: &Image, c: &Image, f: impl for<'t> Fn(Var<'t, f64>, Var<'t, f64>, Var<'t, f64>) -> Var<'t, f64>) -> Result<f64> {
    a.check_same_shape(b)?;
    a.check_same_shape(c)?;
    let tape = Tape::new();
    Ok(f(
        tape.constant(a.to_tensor()),
        tape.constant(b.to_tensor()),
        tape.constant(c.to_tensor()),
    )
    .item())
}

pub fn fusion_intensity_loss(fused: &Image, pat: &Image, mri: &Image) -> Result<f64> {
    eval3(fused, pat, mri, fusion_intensity_var)
}

pub fn fusion_gradient_loss(fused: &Image, pat: &Image, mri: &Image) -> Result<f64> {
    eval3(fused, pat, mri, fusion_gradient_var)
}

/// Runs the trained fusion network on an aligned pair.
pub fn fuse_images(net: &FuseNet, params: &ParamStore<f32>, pat: &Image, mri: &Image) -> Result<Image> {
    pat.check_same_shape(mri)?;
    let tape = Tape::new();
    let b = Binder::frozen(&tape, params);
    let out = net.fuse(&b, tape.constant(pat.to_tensor()), tape.constant(mri.to_tensor()));
    Image::from_tensor(&out.fused.value(), 0, Modality::Fused)
}
