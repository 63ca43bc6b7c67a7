//! Multi-level registration network and the registration losses.
//!
//! A shared convolutional trunk extracts features from the channel-stacked
//! (moving, fixed) pair; level `k` features sit at `1 / 2^k` of the input
//! resolution. Each level has a coarse head estimating a field from the
//! features and a refinement head adding a residual to that field. Levels
//! run from coarsest to finest: the running full-resolution field warps the
//! moving image before the next level looks at it, and each level's
//! (negated) refined field is upsampled and composed onto the running one.
//! The last layer of every head starts at zero, so an untrained network is
//! the identity registration.

use fusekit_autograd::{concat, Conv2dSpec, Real, Tape, Var};
use rand::Rng;

use crate::error::{FuseError, Result};
use crate::imagedata::Image;
use crate::params::{Binder, Init, ParamStore};
use crate::perceptual::PerceptualNet;
use crate::warpfield::{self, smoothness_var, upsample_field_var, warp_var, DeformationField};

/// Parameter-name prefix of the registration network.
pub const PREFIX: &str = "reg.";
/// Default number of levels.
pub const DEFAULT_LEVELS: usize = 2;
/// Weight of the backward similarity term.
pub const LAMBDA_REV: f64 = 0.2;
/// Weight of the smoothness penalty.
pub const LAMBDA_SMOOTH: f64 = 10.0;
const SLOPE: f64 = 0.2;

/// Architecture of the registration network.
#[derive(Clone, Debug, PartialEq)]
pub struct RegNet {
    pub levels: usize,
    /// Trunk channels at level 1; doubled at each further level.
    pub width: usize,
    /// Hidden channels of the estimation heads.
    pub head_width: usize,
}

/// Fields produced at one level, at that level's resolution.
#[derive(Clone, Copy, Debug)]
pub struct LevelFields<'t, T: Real> {
    pub level: usize,
    pub coarse: Var<'t, T>,
    pub refined: Var<'t, T>,
}

/// Result of a registration pass.
#[derive(Clone, Debug)]
pub struct RegOutput<'t, T: Real> {
    /// Full-resolution `[N, 2, H, W]` field; `warp(moving, phi)` aligns with fixed.
    pub phi: Var<'t, T>,
    /// Per-level fields, coarsest first.
    pub levels: Vec<LevelFields<'t, T>>,
}

impl RegNet {
    pub fn new(levels: usize, width: usize, head_width: usize) -> Self {
        Self {
            levels,
            width,
            head_width,
        }
    }

    fn channels(&self, k: usize) -> usize {
        self.width << (k - 1)
    }

    /// Input sides must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.levels
    }

    pub fn init<T: Real, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        let mut cin = 2;
        for k in 1..=self.levels {
            let c = self.channels(k);
            init.conv(&format!("{PREFIX}trunk{k}.down"), c, cin, 3, true);
            init.conv(&format!("{PREFIX}trunk{k}.conv"), c, c, 3, true);
            cin = c;
            init.conv(&format!("{PREFIX}cdfe{k}.hidden"), self.head_width, c, 3, true);
            init.conv_zero(&format!("{PREFIX}cdfe{k}.out"), 2, self.head_width, 3);
            init.conv(&format!("{PREFIX}rdfe{k}.hidden"), self.head_width, 2, 3, true);
            init.conv_zero(&format!("{PREFIX}rdfe{k}.out"), 2, self.head_width, 3);
        }
    }

    /// Trunk features of the stacked pair at level `k` (`1 <= k <= levels`).
    pub fn extract_level_features<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        moving: Var<'t, T>,
        fixed: Var<'t, T>,
        k: usize,
    ) -> Var<'t, T> {
        assert!((1..=self.levels).contains(&k), "level {k} outside 1..={}", self.levels);
        let mut h = concat(&[moving, fixed], 1);
        for j in 1..=k {
            h = b
                .conv(&format!("{PREFIX}trunk{j}.down"), h, Conv2dSpec::new(2, 1))
                .leaky_relu(SLOPE);
            h = b
                .conv(&format!("{PREFIX}trunk{j}.conv"), h, Conv2dSpec::same(3))
                .leaky_relu(SLOPE);
        }
        h
    }

    /// Coarse field estimate from level-`k` features.
    pub fn cdfe<'t, T: Real>(&self, b: &Binder<'t, '_, T>, feats: Var<'t, T>, k: usize) -> Var<'t, T> {
        let h = b
            .conv(&format!("{PREFIX}cdfe{k}.hidden"), feats, Conv2dSpec::same(3))
            .leaky_relu(SLOPE);
        b.conv(&format!("{PREFIX}cdfe{k}.out"), h, Conv2dSpec::same(3))
    }

    /// The refinement head alone, without the residual connection.
    pub fn rdfe_residual<'t, T: Real>(&self, b: &Binder<'t, '_, T>, coarse: Var<'t, T>, k: usize) -> Var<'t, T> {
        let h = b
            .conv(&format!("{PREFIX}rdfe{k}.hidden"), coarse, Conv2dSpec::same(3))
            .leaky_relu(SLOPE);
        b.conv(&format!("{PREFIX}rdfe{k}.out"), h, Conv2dSpec::same(3))
    }

    /// Refined field: residual prediction plus the coarse field.
    pub fn rdfe<'t, T: Real>(&self, b: &Binder<'t, '_, T>, coarse: Var<'t, T>, k: usize) -> Var<'t, T> {
        self.rdfe_residual(b, coarse, k).add(coarse)
    }

    /// Estimates the field aligning `moving` to `fixed`, both `[N, 1, H, W]`.
    pub fn forward<'t, T: Real>(&self, b: &Binder<'t, '_, T>, moving: Var<'t, T>, fixed: Var<'t, T>) -> RegOutput<'t, T> {
        let s = moving.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        assert!(
            h % self.divisor() == 0 && w % self.divisor() == 0,
            "registration input {h}x{w} not divisible by {}",
            self.divisor()
        );
        let tape = b.tape();
        let mut phi: Option<Var<'t, T>> = None;
        let mut levels = Vec::with_capacity(self.levels);
        for k in (1..=self.levels).rev() {
            let warped = match phi {
                Some(f) => warp_var(moving, f),
                None => moving,
            };
            let feats = self.extract_level_features(b, warped, fixed, k);
            let coarse = self.cdfe(b, feats, k);
            let refined = self.rdfe(b, coarse, k);
            levels.push(LevelFields {
                level: k,
                coarse,
                refined,
            });
            let step = upsample_field_var(refined.neg(), h, w);
            phi = Some(match phi {
                Some(f) => warpfield::compose_var(f, step),
                None => step,
            });
        }
        let phi = phi.unwrap_or_else(|| tape.constant(fusekit_autograd::Tensor::zeros(&[n, 2, h, w])));
        RegOutput { phi, levels }
    }
}

/// Forward term `L1pyr(warp(fixed, -phi), moving)` plus `lambda_rev` times
/// the backward term `L1pyr(warp(moving, phi), fixed)`.
pub fn bidirectional_similarity_var<'t, T: Real>(
    perc: &PerceptualNet<T>,
    phi: Var<'t, T>,
    moving: Var<'t, T>,
    fixed: Var<'t, T>,
    lambda_rev: f64,
) -> Var<'t, T> {
    let forward = perc.l1_distance(warp_var(fixed, phi.neg()), moving);
    let backward = perc.l1_distance(warp_var(moving, phi), fixed);
    forward.add(backward.mul_scalar(lambda_rev))
}

/// Similarity plus `lambda_smooth` times the smoothness penalty.
pub fn registration_loss_var<'t, T: Real>(
    perc: &PerceptualNet<T>,
    phi: Var<'t, T>,
    moving: Var<'t, T>,
    fixed: Var<'t, T>,
    lambda_rev: f64,
    lambda_smooth: f64,
) -> Var<'t, T> {
    bidirectional_similarity_var(perc, phi, moving, fixed, lambda_rev).add(smoothness_var(phi).mul_scalar(lambda_smooth))
}

fn loss_inputs(phi: &DeformationField, moving: &Image, fixed: &Image) -> Result<()> {
    moving.check_same_shape(fixed)?;
    if phi.height() != moving.height() || phi.width() != moving.width() {
        return Err(FuseError::Shape("field does not match the images".into()));
    }
    Ok(())
}

pub fn bidirectional_similarity_loss(
    perc: &PerceptualNet<f64>,
    phi: &DeformationField,
    pseudo_mri: &Image,
    mri: &Image,
) -> Result<f64> {
    loss_inputs(phi, pseudo_mri, mri)?;
    let tape = Tape::new();
    let v = bidirectional_similarity_var(
        perc,
        tape.constant(phi.to_tensor()),
        tape.constant(pseudo_mri.to_tensor()),
        tape.constant(mri.to_tensor()),
        LAMBDA_REV,
    );
    Ok(v.item())
}

pub fn registration_loss(perc: &PerceptualNet<f64>, phi: &DeformationField, pseudo_mri: &Image, mri: &Image) -> Result<f64> {
    loss_inputs(phi, pseudo_mri, mri)?;
    let tape = Tape::new();
    let v = registration_loss_var(
        perc,
        tape.constant(phi.to_tensor()),
        tape.constant(pseudo_mri.to_tensor()),
        tape.constant(mri.to_tensor()),
        LAMBDA_REV,
        LAMBDA_SMOOTH,
    );
    Ok(v.item())
}

/// A registration result for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub phi: DeformationField,
    /// `warp(moving, phi)`.
    pub registered: Image,
}

/// Registers `moving` onto `fixed` with trained parameters.
pub fn register(net: &RegNet, params: &ParamStore<f32>, moving: &Image, fixed: &Image) -> Result<Registration> {
    moving.check_same_shape(fixed)?;
    let d = net.divisor();
    if !moving.height().is_multiple_of(d) || !moving.width().is_multiple_of(d) {
        return Err(FuseError::Invalid(format!(
            "{}x{} is not divisible by {d}",
            moving.height(),
            moving.width()
        )));
    }
    let tape = Tape::new();
    let b = Binder::frozen(&tape, params);
    let out = net.forward(&b, tape.constant(moving.to_tensor()), tape.constant(fixed.to_tensor()));
    let phi = DeformationField::from_tensor(&out.phi.value(), 0)?;
    let registered = warpfield::warp(moving, &phi)?;
    Ok(Registration { phi, registered })
}
