//! Frozen convolutional feature pyramid, Gram matrices, and the perceptual,
//! style and combined perceptual-style losses used to keep the synthesis
//! cycle consistent.
//!
//! The pyramid stands in for a pretrained classification backbone: five
//! 3x3 convolution stages with a `tanh` after each, weights drawn from a
//! fixed seed and never trained. Stage 1 keeps the input resolution and
//! each later stage halves it.

use fusekit_autograd::{Conv2dSpec, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FuseError, Result};
use crate::imagedata::Image;
use crate::params::{Binder, Init, ParamStore};

/// Number of pyramid levels.
pub const LEVELS: usize = 5;
/// Default channel widths of the five stages.
pub const DEFAULT_CHANNELS: [usize; LEVELS] = [8, 16, 32, 64, 64];
/// Seed for the frozen extractor weights.
pub const DEFAULT_SEED: u64 = 0x005E_ED0F_F3A7;
/// Per-level weights of the style term.
pub const STYLE_WEIGHTS: [f64; LEVELS] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0, 1.0];
/// Weight of the perceptual term in the combined loss.
pub const LAMBDA_PERCEPTUAL: f64 = 1.0;
/// Weight of the style term in the combined loss.
pub const LAMBDA_STYLE: f64 = 100.0;
/// Smallest accepted input side.
pub const MIN_INPUT: usize = 16;

/// The frozen feature extractor.
#[derive(Clone, Debug)]
pub struct PerceptualNet<T: Real> {
    channels: [usize; LEVELS],
    seed: u64,
    params: ParamStore<T>,
}

impl<T: Real> PerceptualNet<T> {
    pub fn new(seed: u64, channels: [usize; LEVELS]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let mut cin = 1;
        for (j, &c) in channels.iter().enumerate() {
            // a gain of ~1.7 keeps tanh units out of both the linear and
            // the saturated regime for inputs in [-1, 1]
            let bound = 1.7 * (3.0 / (cin * 9) as f64).sqrt();
            init.conv_scaled(&format!("stage{j}"), c, cin, 3, true, bound);
            cin = c;
        }
        Self {
            channels,
            seed,
            params: store.cast(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn channels(&self) -> [usize; LEVELS] {
        self.channels
    }

    /// The five feature levels of an `[N, 1, H, W]` variable.
    pub fn features<'t>(&self, x: Var<'t, T>) -> Vec<Var<'t, T>> {
        let s = x.shape();
        assert!(
            s[2] >= MIN_INPUT && s[3] >= MIN_INPUT,
            "perceptual pyramid needs at least {MIN_INPUT}x{MIN_INPUT}, got {s:?}"
        );
        let b = Binder::frozen(x.tape(), &self.params);
        let mut h = x.mul_scalar(2.0).add_scalar(-1.0);
        let mut out = Vec::with_capacity(LEVELS);
        for j in 0..LEVELS {
            let stride = if j == 0 { 1 } else { 2 };
            h = b.conv(&format!("stage{j}"), h, Conv2dSpec::new(stride, 1)).tanh();
            out.push(h);
        }
        out
    }

    /// Sum over levels of the mean absolute feature difference.
    pub fn l1_distance<'t>(&self, a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
        let fa = self.features(a);
        let fb = self.features(b);
        sum_vars(fa.iter().zip(&fb).map(|(x, y)| x.sub(*y).abs().mean_all()))
    }
}

impl<T: Real> Default for PerceptualNet<T> {
    fn default() -> Self {
        Self::new(DEFAULT_SEED, DEFAULT_CHANNELS)
    }
}

pub(crate) fn sum_vars<'t, T: Real>(terms: impl IntoIterator<Item = Var<'t, T>>) -> Var<'t, T> {
    terms
        .into_iter()
        .reduce(|a, b| a.add(b))
        .expect("sum of no terms")
}

/// Feature levels of one image.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    /// `[C_j, H_j, W_j]` per level.
    pub levels: Vec<Tensor<f64>>,
    pub layer_weights: [f64; LEVELS],
}

/// Evaluates the pyramid on a single image.
pub fn feature_pyramid(net: &PerceptualNet<f64>, img: &Image) -> Result<FeaturePyramid> {
    if img.height() < MIN_INPUT || img.width() < MIN_INPUT {
        return Err(FuseError::Invalid(format!(
            "feature pyramid needs at least {MIN_INPUT}x{MIN_INPUT}, got {}x{}",
            img.height(),
            img.width()
        )));
    }
    let tape = Tape::new();
    let levels = net
        .features(tape.constant(img.to_tensor()))
        .into_iter()
        .map(|v| {
            let t = (*v.value()).clone();
            let s = t.shape().to_vec();
            t.reshape(&s[1..])
        })
        .collect();
    Ok(FeaturePyramid {
        levels,
        layer_weights: STYLE_WEIGHTS,
    })
}

/// `[N, C, H, W] -> [N, C, C]` Gram matrices normalized by `C * H * W`.
pub fn gram_var<'t, T: Real>(f: Var<'t, T>) -> Var<'t, T> {
    let s = f.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let flat = f.reshape(&[n, c, hw]);
    flat.matmul_t(flat).mul_scalar(1.0 / (c * hw) as f64)
}

/// Gram matrix of a `[C, H, W]` feature map.
pub fn gram_matrix(f: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = f.shape();
    if s.len() != 3 {
        return Err(FuseError::Shape(format!("feature map must be [C, H, W], got {s:?}")));
    }
    let tape = Tape::new();
    let g = gram_var(tape.constant(f.clone().reshape(&[1, s[0], s[1], s[2]])));
    Ok((*g.value()).clone().reshape(&[s[0], s[0]]))
}

/// Sum over levels of the mean squared feature difference, for both cycles.
pub fn perceptual_loss_var<'t, T: Real>(
    net: &PerceptualNet<T>,
    a_cycle: Var<'t, T>,
    a: Var<'t, T>,
    b_cycle: Var<'t, T>,
    b: Var<'t, T>,
) -> Var<'t, T> {
    let term = |x: Var<'t, T>, y: Var<'t, T>| {
        let fx = net.features(x);
        let fy = net.features(y);
        sum_vars(fx.iter().zip(&fy).map(|(p, q)| p.sub(*q).square().mean_all()))
    };
    term(a, a_cycle).add(term(b, b_cycle))
}

/// Weighted squared Frobenius distance between Gram matrices, for both
/// cycles; averaged over the batch.
pub fn style_loss_var<'t, T: Real>(
    net: &PerceptualNet<T>,
    a_cycle: Var<'t, T>,
    a: Var<'t, T>,
    b_cycle: Var<'t, T>,
    b: Var<'t, T>,
) -> Var<'t, T> {
    let term = |x: Var<'t, T>, y: Var<'t, T>| {
        let n = x.shape()[0] as f64;
        let fx = net.features(x);
        let fy = net.features(y);
        sum_vars(fx.iter().zip(&fy).zip(STYLE_WEIGHTS).map(|((p, q), w)| {
            gram_var(*p)
                .sub(gram_var(*q))
                .square()
                .sum_all()
                .mul_scalar(w / n)
        }))
    };
    term(a, a_cycle).add(term(b, b_cycle))
}

/// Both terms of the perceptual-style loss, returned separately.
pub struct PstTerms<'t, T: Real> {
    pub perceptual: Var<'t, T>,
    pub style: Var<'t, T>,
    pub total: Var<'t, T>,
}

/// `lambda_p * perceptual + lambda_s * style`, sharing one feature pass.
pub fn pst_loss_var<'t, T: Real>(
    net: &PerceptualNet<T>,
    a_cycle: Var<'t, T>,
    a: Var<'t, T>,
    b_cycle: Var<'t, T>,
    b: Var<'t, T>,
    lambda_p: f64,
    lambda_s: f64,
) -> PstTerms<'t, T> {
    let mut pcp = Vec::new();
    let mut sty = Vec::new();
    for (x, y) in [(a, a_cycle), (b, b_cycle)] {
        let n = x.shape()[0] as f64;
        let fx = net.features(x);
        let fy = net.features(y);
        for ((p, q), w) in fx.iter().zip(&fy).zip(STYLE_WEIGHTS) {
            pcp.push(p.sub(*q).square().mean_all());
            sty.push(gram_var(*p).sub(gram_var(*q)).square().sum_all().mul_scalar(w / n));
        }
    }
    let perceptual = sum_vars(pcp);
    let style = sum_vars(sty);
    let total = perceptual.mul_scalar(lambda_p).add(style.mul_scalar(lambda_s));
    PstTerms {
        perceptual,
        style,
        total,
    }
}

fn image_loss(
    imgs: [&Image; 4],
    f: impl for<'t> Fn(&'t Tape<f64>, [Var<'t, f64>; 4]) -> Var<'t, f64>,
) -> Result<f64> {
    for img in &imgs[1..] {
        imgs[0].check_same_shape(img)?;
    }
    if imgs[0].height() < MIN_INPUT || imgs[0].width() < MIN_INPUT {
        return Err(FuseError::Invalid(format!("losses need at least {MIN_INPUT}x{MIN_INPUT} images")));
    }
    let tape = Tape::new();
    let v = imgs.map(|i| tape.constant(i.to_tensor()));
    Ok(f(&tape, v).item())
}

pub fn perceptual_loss(net: &PerceptualNet<f64>, a_cycle: &Image, a: &Image, b_cycle: &Image, b: &Image) -> Result<f64> {
    image_loss([a_cycle, a, b_cycle, b], |_, [ac, a, bc, b]| perceptual_loss_var(net, ac, a, bc, b))
}

pub fn style_loss(net: &PerceptualNet<f64>, a_cycle: &Image, a: &Image, b_cycle: &Image, b: &Image) -> Result<f64> {
    image_loss([a_cycle, a, b_cycle, b], |_, [ac, a, bc, b]| style_loss_var(net, ac, a, bc, b))
}

pub fn pst_loss(net: &PerceptualNet<f64>, a_cycle: &Image, a: &Image, b_cycle: &Image, b: &Image) -> Result<f64> {
    image_loss([a_cycle, a, b_cycle, b], |_, [ac, a, bc, b]| {
        pst_loss_var(net, ac, a, bc, b, LAMBDA_PERCEPTUAL, LAMBDA_STYLE).total
    })
}
