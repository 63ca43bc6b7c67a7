//! Cross-modal style transfer: the PAT-to-MRI generator, its MRI-to-PAT
//! counterpart, patch discriminators for both domains, and the
//! least-squares adversarial losses.

use fusekit_autograd::{Conv2dSpec, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{FuseError, Result};
use crate::imagedata::{Image, Modality};
use crate::params::{Binder, Init, ParamStore};

/// Instance-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;
/// Slope of the leaky ReLU in the discriminators.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Residual blocks in each generator.
pub const RES_BLOCKS: usize = 9;

/// Parameter-name prefix of the PAT-to-MRI generator.
pub const P2M: &str = "synth.p2m.";
/// Parameter-name prefix of the MRI-to-PAT generator.
pub const M2P: &str = "synth.m2p.";
/// Parameter-name prefix of the discriminator that scores MRI-like images.
pub const D_MRI: &str = "synth.d_mri.";
/// Parameter-name prefix of the discriminator that scores PAT-like images.
pub const D_PAT: &str = "synth.d_pat.";

/// Encoder / residual / decoder generator for single-channel images.
///
/// Layout: 7x7 stem, two stride-2 downsampling convolutions, residual
/// blocks at a quarter of the input resolution, two nearest-neighbour
/// upsampling stages each followed by a 3x3 convolution, and a 7x7 output
/// convolution with a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub prefix: String,
    pub base: usize,
    pub res_blocks: usize,
}

impl Generator {
    pub fn new(prefix: &str, base: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            base,
            res_blocks: RES_BLOCKS,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}{}", self.prefix, part)
    }

    pub fn init<T: Real, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        let c = self.base;
        init.conv(&self.name("stem"), c, 1, 7, true);
        init.conv(&self.name("down1"), 2 * c, c, 3, true);
        init.conv(&self.name("down2"), 4 * c, 2 * c, 3, true);
        for i in 0..self.res_blocks {
            init.conv(&self.name(&format!("res{i}.conv1")), 4 * c, 4 * c, 3, true);
            init.conv(&self.name(&format!("res{i}.conv2")), 4 * c, 4 * c, 3, true);
        }
        init.conv(&self.name("up1"), 2 * c, 4 * c, 3, true);
        init.conv(&self.name("up2"), c, 2 * c, 3, true);
        init.conv(&self.name("out"), 1, c, 7, true);
    }

    fn norm_relu<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
        x.instance_norm(NORM_EPS).relu()
    }

    /// Maps an `[N, 1, H, W]` batch with `H` and `W` divisible by 4 to an
    /// `[N, 1, H, W]` batch in `(0, 1)`.
    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let h = Self::norm_relu(b.conv(&self.name("stem"), x, Conv2dSpec::new(1, 3)));
        let h = Self::norm_relu(b.conv(&self.name("down1"), h, Conv2dSpec::new(2, 1)));
        let mut h = Self::norm_relu(b.conv(&self.name("down2"), h, Conv2dSpec::new(2, 1)));
        for i in 0..self.res_blocks {
            let r = Self::norm_relu(b.conv(&self.name(&format!("res{i}.conv1")), h, Conv2dSpec::same(3)));
            let r = b
                .conv(&self.name(&format!("res{i}.conv2")), r, Conv2dSpec::same(3))
                .instance_norm(NORM_EPS);
            h = h.add(r);
        }
        self.decode(b, h)
    }

    /// The upsampling half, shared with tests of the reduced network.
    pub fn decode<'t, T: Real>(&self, b: &Binder<'t, '_, T>, h: Var<'t, T>) -> Var<'t, T> {
        let h = Self::norm_relu(b.conv(&self.name("up1"), h.upsample_nearest2d(2), Conv2dSpec::same(3)));
        let h = Self::norm_relu(b.conv(&self.name("up2"), h.upsample_nearest2d(2), Conv2dSpec::same(3)));
        b.conv(&self.name("out"), h, Conv2dSpec::new(1, 3)).sigmoid()
    }
}

/// Patch discriminator: three 4x4 stride-2 convolutions with leaky ReLU
/// (instance-normalized after the first) and a 3x3 scoring convolution.
/// The score grid is 1/8 of the input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub prefix: String,
    pub base: usize,
}

impl Discriminator {
    pub fn new(prefix: &str, base: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            base,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}{}", self.prefix, part)
    }

    pub fn init<T: Real, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        let c = self.base;
        init.conv(&self.name("c1"), c, 1, 4, true);
        init.conv(&self.name("c2"), 2 * c, c, 4, true);
        init.conv(&self.name("c3"), 4 * c, 2 * c, 4, true);
        init.conv(&self.name("score"), 1, 4 * c, 3, true);
    }

    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let down = Conv2dSpec::new(2, 1);
        let h = b.conv(&self.name("c1"), x, down).leaky_relu(LEAKY_SLOPE);
        let h = b
            .conv(&self.name("c2"), h, down)
            .instance_norm(NORM_EPS)
            .leaky_relu(LEAKY_SLOPE);
        let h = b
            .conv(&self.name("c3"), h, down)
            .instance_norm(NORM_EPS)
            .leaky_relu(LEAKY_SLOPE);
        b.conv(&self.name("score"), h, Conv2dSpec::same(3))
    }
}

/// Both generators and both discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthNet {
    /// PAT to pseudo-MRI.
    pub p2m: Generator,
    /// MRI to pseudo-PAT.
    pub m2p: Generator,
    pub d_mri: Discriminator,
    pub d_pat: Discriminator,
}

impl SynthNet {
    pub fn new(gen_base: usize, disc_base: usize) -> Self {
        Self {
            p2m: Generator::new(P2M, gen_base),
            m2p: Generator::new(M2P, gen_base),
            d_mri: Discriminator::new(D_MRI, disc_base),
            d_pat: Discriminator::new(D_PAT, disc_base),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        self.p2m.init(init);
        self.m2p.init(init);
        self.d_mri.init(init);
        self.d_pat.init(init);
    }

    /// Translations and cycle reconstructions of a PAT/MRI batch.
    pub fn forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        pat: Var<'t, T>,
        mri: Var<'t, T>,
    ) -> SynthesisOutputs<'t, T> {
        let pseudo_mri = self.p2m.forward(b, pat);
        let pseudo_pat = self.m2p.forward(b, mri);
        SynthesisOutputs {
            pseudo_mri,
            pseudo_pat,
            pat_cycle: self.m2p.forward(b, pseudo_mri),
            mri_cycle: self.p2m.forward(b, pseudo_pat),
        }
    }
}

/// Outputs of one synthesis pass.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisOutputs<'t, T: Real> {
    pub pseudo_mri: Var<'t, T>,
    pub pseudo_pat: Var<'t, T>,
    /// `m2p(p2m(pat))`.
    pub pat_cycle: Var<'t, T>,
    /// `p2m(m2p(mri))`.
    pub mri_cycle: Var<'t, T>,
}

/// Least-squares generator objective averaged over directions:
/// mean of `(D(fake) - 1)^2`.
pub fn lsgan_generator_loss<'t, T: Real>(fake_scores: &[Var<'t, T>]) -> Var<'t, T> {
    let n = fake_scores.len() as f64;
    crate::perceptual::sum_vars(fake_scores.iter().map(|s| s.add_scalar(-1.0).square().mean_all())).mul_scalar(1.0 / n)
}

/// Least-squares discriminator objective averaged over directions:
/// `mean (D(real) - 1)^2 + mean D(fake)^2`.
pub fn lsgan_discriminator_loss<'t, T: Real>(real_scores: &[Var<'t, T>], fake_scores: &[Var<'t, T>]) -> Var<'t, T> {
    assert_eq!(real_scores.len(), fake_scores.len());
    let n = real_scores.len() as f64;
    crate::perceptual::sum_vars(
        real_scores
            .iter()
            .zip(fake_scores)
            .map(|(r, f)| r.add_scalar(-1.0).square().mean_all().add(f.square().mean_all())),
    )
    .mul_scalar(1.0 / n)
}

/// Generator and discriminator adversarial losses for one batch.
pub struct GanLosses<'t, T: Real> {
    pub loss_g: Var<'t, T>,
    pub loss_d: Var<'t, T>,
}

/// Scores fakes and reals in both domains. Fakes are detached for the
/// discriminator objective so that it never pushes on the generators.
pub fn gan_losses<'t, T: Real>(
    net: &SynthNet,
    b: &Binder<'t, '_, T>,
    out: &SynthesisOutputs<'t, T>,
    real_pat: Var<'t, T>,
    real_mri: Var<'t, T>,
) -> GanLosses<'t, T> {
    let fake_mri_score = net.d_mri.forward(b, out.pseudo_mri);
    let fake_pat_score = net.d_pat.forward(b, out.pseudo_pat);
    let loss_g = lsgan_generator_loss(&[fake_mri_score, fake_pat_score]);
    let real = [net.d_mri.forward(b, real_mri), net.d_pat.forward(b, real_pat)];
    let fake = [
        net.d_mri.forward(b, out.pseudo_mri.detach()),
        net.d_pat.forward(b, out.pseudo_pat.detach()),
    ];
    GanLosses {
        loss_g,
        loss_d: lsgan_discriminator_loss(&real, &fake),
    }
}

fn check_divisible(img: &Image, by: usize) -> Result<()> {
    if !img.height().is_multiple_of(by) || !img.width().is_multiple_of(by) {
        return Err(FuseError::Invalid(format!(
            "{}x{} is not divisible by {by}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Runs the PAT-to-MRI generator on one image.
pub fn p2m_generate(net: &SynthNet, params: &ParamStore<f32>, img: &Image) -> Result<Image> {
    check_divisible(img, 4)?;
    let tape = Tape::new();
    let b = Binder::frozen(&tape, params);
    let y = net.p2m.forward(&b, tape.constant(img.to_tensor()));
    Image::from_tensor(&y.value(), 0, Modality::PseudoMri)
}

/// Score grid of a discriminator on one image, `[H/8, W/8]`.
pub fn discriminator_score(disc: &Discriminator, params: &ParamStore<f32>, img: &Image) -> Result<Tensor<f32>> {
    check_divisible(img, 8)?;
    let tape = Tape::new();
    let b = Binder::frozen(&tape, params);
    let s = disc.forward(&b, tape.constant(img.to_tensor()));
    let v = (*s.value()).clone();
    let shape = v.shape()[2..].to_vec();
    Ok(v.reshape(&shape))
}
