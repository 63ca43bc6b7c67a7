//! Two-stage training: configuration, the Adam optimizer, the stage-I and
//! stage-II loops, sectioned checkpoints, inference with trained
//! parameters and the component ablations.
//!
//! Stage I interleaves three updates per batch: a discriminator step, a
//! generator plus registration step, and a fusion reconstruction step on the
//! unaligned pair. Stage II freezes the PAT-to-MRI generator and trains the
//! registration and fusion networks together on the joint objective.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use fusekit_autograd::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FuseError, Result};
use crate::fusenet::{self, FuseNet, FuseNetConfig, FusionWeights};
use crate::imagedata::{stack, Augment, Dataset, Image, Modality, PhantomPair};
use crate::metrics::{self, MetricReport};
use crate::params::{Binder, Init, ParamStore};
use crate::perceptual::{self, PerceptualNet};
use crate::regnet::{self, RegNet};
use crate::synthnet::{self, gan_losses, SynthNet};
use crate::warpfield::{warp_var, DeformationField};

/// Every hyperparameter of a training run, including architecture widths
/// and the synthetic dataset it trains on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha4: f64,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_rev: f64,
    pub lambda_smooth: f64,
    pub eps: f64,
    pub mu: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Random rotation/flip per sample and epoch.
    pub augment: bool,
    /// Phantom pairs generated when the trainer builds its own dataset.
    pub pairs: usize,
    /// How many of those pairs are held out for evaluation.
    pub test_pairs: usize,
    pub deform_magnitude: f64,
    pub use_p2m: bool,
    pub use_mlr: bool,
    pub joint_reg_fusion: bool,
    pub two_stage: bool,
    pub levels: usize,
    pub gen_base: usize,
    pub gen_res_blocks: usize,
    pub disc_base: usize,
    pub reg_width: usize,
    pub reg_head_width: usize,
    pub fuse_dim: usize,
    pub fuse_heads: usize,
    pub fuse_encoder_blocks: usize,
    pub fuse_base_blocks: usize,
    pub fuse_inn_layers: usize,
    pub fuse_decoder_blocks: usize,
    pub kv_pool: usize,
    pub perceptual_seed: u64,
}

impl Default for TrainConfig {
    /// The full schedule and network widths.
    fn default() -> Self {
        let fuse = FuseNetConfig::default();
        let w = FusionWeights::default();
        Self {
            epochs_stage1: 40,
            epochs_stage2: 80,
            lr: 1e-3,
            lr_halve_every: 20,
            alpha1: w.alpha1,
            alpha2: w.alpha2,
            alpha3: w.alpha3,
            alpha4: w.alpha4,
            lambda_p: perceptual::LAMBDA_PERCEPTUAL,
            lambda_s: perceptual::LAMBDA_STYLE,
            lambda_rev: regnet::LAMBDA_REV,
            lambda_smooth: regnet::LAMBDA_SMOOTH,
            eps: w.eps,
            mu: w.mu,
            batch_size: 4,
            seed: 0,
            image_size: 128,
            augment: true,
            pairs: 200,
            test_pairs: 40,
            deform_magnitude: 3.0,
            use_p2m: true,
            use_mlr: true,
            joint_reg_fusion: true,
            two_stage: true,
            levels: regnet::DEFAULT_LEVELS,
            gen_base: 64,
            gen_res_blocks: synthnet::RES_BLOCKS,
            disc_base: 64,
            reg_width: 16,
            reg_head_width: 32,
            fuse_dim: fuse.dim,
            fuse_heads: fuse.heads,
            fuse_encoder_blocks: fuse.encoder_blocks,
            fuse_base_blocks: fuse.base_blocks,
            fuse_inn_layers: fuse.inn_layers,
            fuse_decoder_blocks: fuse.decoder_blocks,
            kv_pool: fuse.kv_pool,
            perceptual_seed: perceptual::DEFAULT_SEED,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(FuseError::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| FuseError::Config(format!("{key}: cannot parse `{v}`")))
}

impl TrainConfig {
    /// Small networks and a short schedule that run on one CPU core:
    /// 64x64 images, batch 4, 8 + 12 epochs.
    pub fn desk() -> Self {
        Self {
            epochs_stage1: 8,
            epochs_stage2: 12,
            image_size: 64,
            gen_base: 4,
            disc_base: 8,
            reg_width: 8,
            reg_head_width: 16,
            fuse_dim: 8,
            fuse_heads: 2,
            fuse_encoder_blocks: 1,
            fuse_decoder_blocks: 1,
            kv_pool: 16,
            ..Self::default()
        }
    }

    /// The smallest configuration that exercises every code path.
    pub fn smoke() -> Self {
        Self {
            epochs_stage1: 1,
            epochs_stage2: 1,
            image_size: 32,
            pairs: 4,
            test_pairs: 0,
            gen_res_blocks: 1,
            ..Self::desk()
        }
    }

    /// A named preset: `full`, `desk` or `smoke`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "smoke" => Ok(Self::smoke()),
            _ => Err(FuseError::Config(format!("unknown preset `{name}`"))),
        }
    }

    /// Sets one key. Hyphens in keys are accepted in place of underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "epochs_stage1" => self.epochs_stage1 = parse_num(k, v)?,
            "epochs_stage2" => self.epochs_stage2 = parse_num(k, v)?,
            "lr" => self.lr = parse_num(k, v)?,
            "lr_halve_every" => self.lr_halve_every = parse_num(k, v)?,
            "alpha1" => self.alpha1 = parse_num(k, v)?,
            "alpha2" => self.alpha2 = parse_num(k, v)?,
            "alpha3" => self.alpha3 = parse_num(k, v)?,
            "alpha4" => self.alpha4 = parse_num(k, v)?,
            "lambda_p" => self.lambda_p = parse_num(k, v)?,
            "lambda_s" => self.lambda_s = parse_num(k, v)?,
            "lambda_rev" => self.lambda_rev = parse_num(k, v)?,
            "lambda_smooth" => self.lambda_smooth = parse_num(k, v)?,
            "eps" => self.eps = parse_num(k, v)?,
            "mu" => self.mu = parse_num(k, v)?,
            "batch_size" => self.batch_size = parse_num(k, v)?,
            "seed" => self.seed = parse_num(k, v)?,
            "image_size" | "size" => self.image_size = parse_num(k, v)?,
            "augment" => self.augment = parse_bool(k, v)?,
            "pairs" => self.pairs = parse_num(k, v)?,
            "test_pairs" => self.test_pairs = parse_num(k, v)?,
            "deform_magnitude" => self.deform_magnitude = parse_num(k, v)?,
            "use_p2m" => self.use_p2m = parse_bool(k, v)?,
            "use_mlr" => self.use_mlr = parse_bool(k, v)?,
            "joint_reg_fusion" => self.joint_reg_fusion = parse_bool(k, v)?,
            "two_stage" => self.two_stage = parse_bool(k, v)?,
            "levels" => self.levels = parse_num(k, v)?,
            "gen_base" => self.gen_base = parse_num(k, v)?,
            "gen_res_blocks" => self.gen_res_blocks = parse_num(k, v)?,
            "disc_base" => self.disc_base = parse_num(k, v)?,
            "reg_width" => self.reg_width = parse_num(k, v)?,
            "reg_head_width" => self.reg_head_width = parse_num(k, v)?,
            "fuse_dim" => self.fuse_dim = parse_num(k, v)?,
            "fuse_heads" => self.fuse_heads = parse_num(k, v)?,
            "fuse_encoder_blocks" => self.fuse_encoder_blocks = parse_num(k, v)?,
            "fuse_base_blocks" => self.fuse_base_blocks = parse_num(k, v)?,
            "fuse_inn_layers" => self.fuse_inn_layers = parse_num(k, v)?,
            "fuse_decoder_blocks" => self.fuse_decoder_blocks = parse_num(k, v)?,
            "kv_pool" => self.kv_pool = parse_num(k, v)?,
            "perceptual_seed" => self.perceptual_seed = parse_num(k, v)?,
            _ => return Err(FuseError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are skipped;
    /// a `preset=` line must come first if present.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FuseError::Config(format!("line {}: expected key=value", i + 1)))?;
            if k.trim() == "preset" {
                *self = Self::preset(v.trim())?;
            } else {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FuseError::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key with its value; floats use Rust's shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs_stage1", self.epochs_stage1.to_string()),
            ("epochs_stage2", self.epochs_stage2.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("lr_halve_every", self.lr_halve_every.to_string()),
            ("alpha1", format!("{:?}", self.alpha1)),
            ("alpha2", format!("{:?}", self.alpha2)),
            ("alpha3", format!("{:?}", self.alpha3)),
            ("alpha4", format!("{:?}", self.alpha4)),
            ("lambda_p", format!("{:?}", self.lambda_p)),
            ("lambda_s", format!("{:?}", self.lambda_s)),
            ("lambda_rev", format!("{:?}", self.lambda_rev)),
            ("lambda_smooth", format!("{:?}", self.lambda_smooth)),
            ("eps", format!("{:?}", self.eps)),
            ("mu", format!("{:?}", self.mu)),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("image_size", self.image_size.to_string()),
            ("augment", self.augment.to_string()),
            ("pairs", self.pairs.to_string()),
            ("test_pairs", self.test_pairs.to_string()),
            ("deform_magnitude", format!("{:?}", self.deform_magnitude)),
            ("use_p2m", self.use_p2m.to_string()),
            ("use_mlr", self.use_mlr.to_string()),
            ("joint_reg_fusion", self.joint_reg_fusion.to_string()),
            ("two_stage", self.two_stage.to_string()),
            ("levels", self.levels.to_string()),
            ("gen_base", self.gen_base.to_string()),
            ("gen_res_blocks", self.gen_res_blocks.to_string()),
            ("disc_base", self.disc_base.to_string()),
            ("reg_width", self.reg_width.to_string()),
            ("reg_head_width", self.reg_head_width.to_string()),
            ("fuse_dim", self.fuse_dim.to_string()),
            ("fuse_heads", self.fuse_heads.to_string()),
            ("fuse_encoder_blocks", self.fuse_encoder_blocks.to_string()),
            ("fuse_base_blocks", self.fuse_base_blocks.to_string()),
            ("fuse_inn_layers", self.fuse_inn_layers.to_string()),
            ("fuse_decoder_blocks", self.fuse_decoder_blocks.to_string()),
            ("kv_pool", self.kv_pool.to_string()),
            ("perceptual_seed", self.perceptual_seed.to_string()),
        ]
    }

    /// Side lengths must be a multiple of this.
    pub fn size_divisor(&self) -> usize {
        // generators need 4, discriminators 8, registration 2^levels
        (1usize << self.levels).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lr", self.lr),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha4", self.alpha4),
            ("lambda_p", self.lambda_p),
            ("lambda_s", self.lambda_s),
            ("lambda_rev", self.lambda_rev),
            ("lambda_smooth", self.lambda_smooth),
            ("eps", self.eps),
            ("mu", self.mu),
        ];
        for (k, v) in weights {
            if !(v.is_finite() && v > 0.0) {
                return Err(FuseError::Config(format!("{k} must be a positive number, got {v}")));
            }
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(FuseError::Config("both stages need at least one epoch".into()));
        }
        if self.lr_halve_every == 0 || self.batch_size == 0 {
            return Err(FuseError::Config("lr_halve_every and batch_size must be >= 1".into()));
        }
        if self.levels == 0 || self.levels > 6 {
            return Err(FuseError::Config(format!("levels must be in 1..=6, got {}", self.levels)));
        }
        let d = self.size_divisor();
        let min = perceptual::MIN_INPUT.max(fusenet::SSIM_WINDOW).max(d);
        if self.image_size < min || !self.image_size.is_multiple_of(d) {
            return Err(FuseError::Config(format!(
                "image_size {} must be a multiple of {d} and at least {min}",
                self.image_size
            )));
        }
        if !(self.deform_magnitude.is_finite() && self.deform_magnitude >= 0.0) {
            return Err(FuseError::Config("deform_magnitude must be >= 0".into()));
        }
        for (k, v) in [
            ("gen_base", self.gen_base),
            ("disc_base", self.disc_base),
            ("reg_width", self.reg_width),
            ("reg_head_width", self.reg_head_width),
        ] {
            if v == 0 {
                return Err(FuseError::Config(format!("{k} must be >= 1")));
            }
        }
        if self.use_p2m && !self.use_mlr {
            return Err(FuseError::Config(
                "use_p2m without use_mlr: the pseudo-MRI is only consumed by registration".into(),
            ));
        }
        FuseNet::new(self.fuse_config()).map_err(|e| FuseError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn fuse_config(&self) -> FuseNetConfig {
        FuseNetConfig {
            dim: self.fuse_dim,
            heads: self.fuse_heads,
            encoder_blocks: self.fuse_encoder_blocks,
            base_blocks: self.fuse_base_blocks,
            inn_layers: self.fuse_inn_layers,
            decoder_blocks: self.fuse_decoder_blocks,
            kv_pool: self.kv_pool,
            ..FuseNetConfig::default()
        }
    }

    pub fn fusion_weights(&self) -> FusionWeights {
        FusionWeights {
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            alpha3: self.alpha3,
            alpha4: self.alpha4,
            mu: self.mu,
            eps: self.eps,
        }
    }

    /// Generates the phantom dataset this configuration describes.
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::generate(self.seed, self.pairs, self.image_size, self.deform_magnitude)
    }
}

/// Learning rate for a zero-based global epoch index.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * 0.5f64.powi((epoch / cfg.lr_halve_every.max(1)) as i32)
}

// ---- networks ---------------------------------------------------------------

/// All networks of the pipeline plus the frozen feature extractor.
#[derive(Clone, Debug)]
pub struct Model {
    pub synth: SynthNet,
    pub reg: RegNet,
    pub fuse: FuseNet,
    pub perc: PerceptualNet<f32>,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let mut synth = SynthNet::new(cfg.gen_base, cfg.disc_base);
        synth.p2m.res_blocks = cfg.gen_res_blocks;
        synth.m2p.res_blocks = cfg.gen_res_blocks;
        Ok(Self {
            synth,
            reg: RegNet::new(cfg.levels, cfg.reg_width, cfg.reg_head_width),
            fuse: FuseNet::new(cfg.fuse_config())?,
            perc: PerceptualNet::new(cfg.perceptual_seed, perceptual::DEFAULT_CHANNELS),
        })
    }

    /// Fresh parameters for every network.
    pub fn init_params(&self, seed: u64) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        self.synth.init(&mut init);
        self.reg.init(&mut init);
        self.fuse.init(&mut init);
        store
    }
}

// ---- optimizer --------------------------------------------------------------

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
    pub steps: u64,
}

/// Adam with per-parameter step counts, so parameters updated at different
/// rates get their own bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: BTreeMap<String, Moments>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        let (b1, b2) = (self.beta1, self.beta2);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                steps: 0,
            });
            st.steps += 1;
            let c1 = 1.0 - b1.powi(st.steps as i32);
            let c2 = 1.0 - b2.powi(st.steps as i32);
            let step = (lr / c1) as f32;
            let c2_sqrt = c2.sqrt() as f32;
            let (b1, b2, eps) = (b1 as f32, b2 as f32, self.eps as f32);
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
        }
    }
}

// ---- loss log ---------------------------------------------------------------

/// Columns of the loss log, in order.
pub const LOSS_COLUMNS: [&str; 16] = [
    "loss_d",
    "loss_gan",
    "loss_pst",
    "loss_reg",
    "loss_synth_reg",
    "loss_rec_pat",
    "loss_rec_mri",
    "loss_decomp",
    "loss_stage1",
    "loss_int",
    "loss_grad",
    "loss_stage2",
    "cc_base",
    "cc_detail",
    "lr",
    "batches",
];

/// Per-epoch means of every loss term that was active in that epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    /// Zero-based global epoch.
    pub epoch: usize,
    /// `stage1`, `stage2` or `single`.
    pub stage: String,
    pub values: BTreeMap<String, f64>,
}

impl LossRow {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}

/// The loss log as CSV; inactive terms are empty cells.
pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut s = format!("epoch,stage,{}\n", LOSS_COLUMNS.join(","));
    for r in rows {
        let _ = write!(s, "{},{}", r.epoch, r.stage);
        for c in LOSS_COLUMNS {
            match r.values.get(c) {
                Some(v) => {
                    let _ = write!(s, ",{v:.17e}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Default)]
struct Accum {
    sums: BTreeMap<&'static str, f64>,
    counts: BTreeMap<&'static str, usize>,
}

impl Accum {
    fn add(&mut self, key: &'static str, v: f64) {
        *self.sums.entry(key).or_default() += v;
        *self.counts.entry(key).or_default() += 1;
    }

    fn finish(self) -> BTreeMap<String, f64> {
        self.sums
            .into_iter()
            .map(|(k, s)| (k.to_string(), s / self.counts[k] as f64))
            .collect()
    }
}

// ---- checkpoint -------------------------------------------------------------

/// Which training phase produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
    Single,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Single => "single",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Stage::Init),
            "stage1" => Ok(Stage::Stage1),
            "stage2" => Ok(Stage::Stage2),
            "single" => Ok(Stage::Single),
            _ => Err(FuseError::Checkpoint(format!("unknown stage `{s}`"))),
        }
    }
}

const MAGIC: &[u8; 4] = b"FKCP";
const FORMAT_VERSION: u32 = 1;

/// Checkpoint sections holding network parameters, with the parameter-name
/// prefix each one covers.
pub const PARAM_SECTIONS: [(&str, &str); 5] = [
    ("synthnet", "synth."),
    ("regnet", regnet::PREFIX),
    ("fusenet.encoder", fusenet::ENCODER),
    ("fusenet.fusion", fusenet::FUSION),
    ("fusenet.decoder", fusenet::DECODER),
];
const META_SECTION: &str = "meta";
const OPTIMIZER_SECTION: &str = "optimizer";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Number of completed epochs across both stages.
    pub epoch: usize,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub optimizer: Adam,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_str(out, name);
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FuseError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FuseError::Checkpoint("name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let nd = self.u32()? as usize;
        let shape = (0..nd).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| FuseError::Checkpoint(format!("`{name}` is too large")))?;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| FuseError::Checkpoint("size overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect();
        Ok((name, Tensor::new(&shape, data)))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn tensor_list(entries: &[(String, &Tensor<f32>)]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, entries.len() as u32);
    for (n, t) in entries {
        put_tensor(&mut out, n, t);
    }
    out
}

fn read_tensor_list(payload: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { buf: payload, pos: 0 };
    let n = r.u32()?;
    let list = (0..n).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    if !r.done() {
        return Err(FuseError::Checkpoint("trailing bytes in section".into()));
    }
    Ok(list)
}

impl Checkpoint {
    /// Serializes to the sectioned binary format: magic, version, section
    /// count, then `(name, byte length, payload)` per section.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(String, Vec<u8>)> = Vec::new();
        let mut meta = format!("stage={}\nepoch={}\n", self.stage.as_str(), self.epoch);
        let _ = writeln!(meta, "adam.beta1={:?}", self.optimizer.beta1);
        let _ = writeln!(meta, "adam.beta2={:?}", self.optimizer.beta2);
        let _ = writeln!(meta, "adam.eps={:?}", self.optimizer.eps);
        for (name, st) in &self.optimizer.state {
            let _ = writeln!(meta, "adam.steps.{name}={}", st.steps);
        }
        for line in self.config.to_text().lines() {
            let _ = writeln!(meta, "config.{line}");
        }
        sections.push((META_SECTION.into(), meta.into_bytes()));
        for (section, prefix) in PARAM_SECTIONS {
            let entries: Vec<(String, &Tensor<f32>)> = self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.to_string(), t))
                .collect();
            sections.push((section.into(), tensor_list(&entries)));
        }
        let moments: Vec<(String, &Tensor<f32>)> = self
            .optimizer
            .state
            .iter()
            .flat_map(|(n, st)| [(format!("m:{n}"), &st.m), (format!("v:{n}"), &st.v)])
            .collect();
        sections.push((OPTIMIZER_SECTION.into(), tensor_list(&moments)));

        let mut out = MAGIC.to_vec();
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, sections.len() as u32);
        for (name, payload) in sections {
            put_str(&mut out, &name);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(FuseError::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FuseError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut sections = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let len = usize::try_from(r.u64()?).map_err(|_| FuseError::Checkpoint("section too large".into()))?;
            sections.insert(name, r.take(len)?);
        }
        if !r.done() {
            return Err(FuseError::Checkpoint("trailing bytes after last section".into()));
        }
        let section = |name: &str| {
            sections
                .get(name)
                .copied()
                .ok_or_else(|| FuseError::Checkpoint(format!("missing section `{name}`")))
        };

        let meta = std::str::from_utf8(section(META_SECTION)?)
            .map_err(|_| FuseError::Checkpoint("meta section is not UTF-8".into()))?;
        let mut stage = None;
        let mut epoch = None;
        let mut optimizer = Adam::default();
        let mut steps = BTreeMap::new();
        let mut config_text = String::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FuseError::Checkpoint(format!("bad meta line `{line}`")))?;
            let bad = |_| FuseError::Checkpoint(format!("bad meta value `{line}`"));
            if let Some(c) = k.strip_prefix("config.") {
                let _ = writeln!(config_text, "{c}={v}");
            } else if let Some(n) = k.strip_prefix("adam.steps.") {
                steps.insert(n.to_string(), v.parse::<u64>().map_err(|_| bad(()))?);
            } else {
                match k {
                    "stage" => stage = Some(Stage::parse(v)?),
                    "epoch" => epoch = Some(v.parse::<usize>().map_err(|_| bad(()))?),
                    "adam.beta1" => optimizer.beta1 = v.parse().map_err(|_| bad(()))?,
                    "adam.beta2" => optimizer.beta2 = v.parse().map_err(|_| bad(()))?,
                    "adam.eps" => optimizer.eps = v.parse().map_err(|_| bad(()))?,
                    _ => return Err(FuseError::Checkpoint(format!("unknown meta key `{k}`"))),
                }
            }
        }
        let config = TrainConfig::from_text(&config_text).map_err(|e| FuseError::Checkpoint(e.to_string()))?;

        let mut params = ParamStore::new();
        for (section_name, prefix) in PARAM_SECTIONS {
            for (name, t) in read_tensor_list(section(section_name)?)? {
                if !name.starts_with(prefix) {
                    return Err(FuseError::Checkpoint(format!("`{name}` does not belong in `{section_name}`")));
                }
                params.insert(name, t);
            }
        }
        let mut firsts: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut seconds: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, t) in read_tensor_list(section(OPTIMIZER_SECTION)?)? {
            match name.split_once(':') {
                Some(("m", n)) => firsts.insert(n.to_string(), t),
                Some(("v", n)) => seconds.insert(n.to_string(), t),
                _ => return Err(FuseError::Checkpoint(format!("bad optimizer entry `{name}`"))),
            };
        }
        for (name, m) in firsts {
            let v = seconds
                .remove(&name)
                .ok_or_else(|| FuseError::Checkpoint(format!("second moment of `{name}` missing")))?;
            let s = steps
                .remove(&name)
                .ok_or_else(|| FuseError::Checkpoint(format!("step count of `{name}` missing")))?;
            optimizer.state.insert(name, Moments { m, v, steps: s });
        }
        if !seconds.is_empty() || !steps.is_empty() {
            return Err(FuseError::Checkpoint("unpaired optimizer state".into()));
        }
        Ok(Self {
            stage: stage.ok_or_else(|| FuseError::Checkpoint("stage missing".into()))?,
            epoch: epoch.ok_or_else(|| FuseError::Checkpoint("epoch missing".into()))?,
            config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| FuseError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| FuseError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that every parameter the configured networks need is present
    /// with the right shape.
    pub fn check_complete(&self, model: &Model) -> Result<()> {
        let expected = model.init_params(0);
        for (name, t) in expected.iter() {
            let section = PARAM_SECTIONS
                .iter()
                .find(|(_, p)| name.starts_with(p))
                .map(|(s, _)| *s)
                .unwrap_or("?");
            match self.params.get(name) {
                None => {
                    return Err(FuseError::Checkpoint(format!(
                        "section `{section}` lacks parameter `{name}`"
                    )))
                }
                Some(have) if have.shape() != t.shape() => {
                    return Err(FuseError::Checkpoint(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// A checkpoint with freshly initialized parameters.
    pub fn initial(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(cfg)?;
        Ok(Self {
            stage: Stage::Init,
            epoch: 0,
            config: cfg.clone(),
            params: model.init_params(cfg.seed),
            optimizer: Adam::default(),
        })
    }
}

// ---- training loops -----------------------------------------------------------

/// A finished training phase.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRow>,
}

fn finite(epoch: usize, step: usize, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FuseError::NonFinite {
            epoch,
            step,
            term: term.to_string(),
            value: v,
        })
    }
}

fn contains_prefix(prefixes: &[&str], name: &str) -> bool {
    prefixes.iter().any(|p| name.starts_with(p))
}

struct Trainer<'d> {
    cfg: TrainConfig,
    model: Model,
    params: ParamStore<f32>,
    adam: Adam,
    epoch: usize,
    data: &'d [PhantomPair],
    weights: FusionWeights,
}

/// A batch as `[B, 1, H, W]` tensors.
struct Batch {
    pat: Tensor<f32>,
    mri: Tensor<f32>,
}

impl Trainer<'_> {
    fn batches(&self) -> Result<Vec<Batch>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (self.epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let pairs: Vec<PhantomPair> = chunk
                .iter()
                .map(|&i| {
                    let p = &self.data[i];
                    let k = if self.cfg.augment { rng.random_range(0..=Augment::ALL.len()) } else { 0 };
                    if k == 0 {
                        p.clone()
                    } else {
                        p.augmented(Augment::ALL[k - 1])
                    }
                })
                .collect();
            let pats: Vec<&Image> = pairs.iter().map(|p| &p.pat).collect();
            let mris: Vec<&Image> = pairs.iter().map(|p| &p.mri).collect();
            out.push(Batch {
                pat: stack(&pats)?,
                mri: stack(&mris)?,
            });
        }
        Ok(out)
    }

    /// Builds a graph with `trainable` parameters as variables, evaluates
    /// `loss`, and applies one Adam step. Returns the named scalar values.
    fn update(
        &mut self,
        trainable: &[&str],
        step: usize,
        loss: impl for<'t> FnOnce(&Model, &Binder<'t, '_, f32>) -> (Var<'t, f32>, Vec<(&'static str, Var<'t, f32>)>),
    ) -> Result<Vec<(&'static str, f64)>> {
        let lr = lr_at(&self.cfg, self.epoch);
        let (values, grads) = {
            let tape = Tape::new();
            let b = Binder::with_filter(&tape, &self.params, |n| contains_prefix(trainable, n));
            let (total, terms) = loss(&self.model, &b);
            let mut values = Vec::with_capacity(terms.len());
            for (k, v) in terms {
                values.push((k, finite(self.epoch, step, k, v.item() as f64)?));
            }
            let grads = b.gradients(&tape.backward(total));
            (values, grads)
        };
        for (name, g) in &grads {
            if !g.all_finite() {
                return Err(FuseError::NonFinite {
                    epoch: self.epoch,
                    step,
                    term: format!("gradient of {name}"),
                    value: f64::NAN,
                });
            }
        }
        self.adam.step(&mut self.params, &grads, lr);
        Ok(values)
    }

    fn record(acc: &mut Accum, values: Vec<(&'static str, f64)>) {
        for (k, v) in values {
            acc.add(k, v);
        }
    }

    /// One discriminator step and one generator + registration step.
    fn synthesis_registration_steps(&mut self, batch: &Batch, step: usize, acc: &mut Accum) -> Result<()> {
        let cfg = self.cfg.clone();
        if cfg.use_p2m {
            let values = self.update(&[synthnet::D_MRI, synthnet::D_PAT], step, |m, b| {
                let t = b.tape();
                let (pat, mri) = (t.constant(batch.pat.clone()), t.constant(batch.mri.clone()));
                let out = m.synth.forward(b, pat, mri);
                let gan = gan_losses(&m.synth, b, &out, pat, mri);
                (gan.loss_d, vec![("loss_d", gan.loss_d)])
            })?;
            Self::record(acc, values);
        }
        if !cfg.use_mlr {
            return Ok(());
        }
        let trainable: &[&str] = if cfg.use_p2m {
            &[synthnet::P2M, synthnet::M2P, regnet::PREFIX]
        } else {
            &[regnet::PREFIX]
        };
        let values = self.update(trainable, step, |m, b| {
            let t = b.tape();
            let (pat, mri) = (t.constant(batch.pat.clone()), t.constant(batch.mri.clone()));
            let mut terms = Vec::new();
            let mut total = None;
            let moving = if cfg.use_p2m {
                let out = m.synth.forward(b, pat, mri);
                let pst = perceptual::pst_loss_var(
                    &m.perc,
                    out.pat_cycle,
                    pat,
                    out.mri_cycle,
                    mri,
                    cfg.lambda_p,
                    cfg.lambda_s,
                );
                let fake = [
                    m.synth.d_mri.forward(b, out.pseudo_mri),
                    m.synth.d_pat.forward(b, out.pseudo_pat),
                ];
                let gan = synthnet::lsgan_generator_loss(&fake);
                terms.push(("loss_pst", pst.total));
                terms.push(("loss_gan", gan));
                total = Some(pst.total.add(gan));
                out.pseudo_mri
            } else {
                pat
            };
            let phi = m.reg.forward(b, moving, mri).phi;
            let reg = regnet::registration_loss_var(&m.perc, phi, moving, mri, cfg.lambda_rev, cfg.lambda_smooth);
            terms.push(("loss_reg", reg));
            let total = total.map_or(reg, |t| t.add(reg));
            terms.push(("loss_synth_reg", total));
            (total, terms)
        })?;
        Self::record(acc, values);
        Ok(())
    }

    /// Encoder/decoder reconstruction of each modality on its own.
    fn reconstruction_step(&mut self, batch: &Batch, step: usize, acc: &mut Accum) -> Result<()> {
        let w = self.weights;
        let values = self.update(&[fusenet::ENCODER, fusenet::DECODER], step, |m, b| {
            let t = b.tape();
            let (pat, mri) = (t.constant(batch.pat.clone()), t.constant(batch.mri.clone()));
            let (dp, pat_rec) = m.fuse.reconstruct(b, pat);
            let (dm, mri_rec) = m.fuse.reconstruct(b, mri);
            let s = fusenet::stage1_fusion_loss_var(pat, mri, pat_rec, mri_rec, &dp, &dm, &w);
            (
                s.total,
                vec![
                    ("loss_rec_pat", s.rec_pat),
                    ("loss_rec_mri", s.rec_mri),
                    ("loss_decomp", s.decomp.loss),
                    ("loss_stage1", s.total),
                    ("cc_base", s.decomp.cc_base),
                    ("cc_detail", s.decomp.cc_detail),
                ],
            )
        })?;
        Self::record(acc, values);
        Ok(())
    }

    /// Registration and fusion trained on the joint objective, with the
    /// PAT-to-MRI generator frozen.
    fn joint_step(&mut self, batch: &Batch, step: usize, acc: &mut Accum) -> Result<()> {
        let cfg = self.cfg.clone();
        let w = self.weights;
        let mut trainable = vec![fusenet::ENCODER, fusenet::FUSION, fusenet::DECODER];
        if cfg.use_mlr {
            trainable.push(regnet::PREFIX);
        }
        let values = self.update(&trainable, step, |m, b| {
            let t = b.tape();
            let (pat, mri) = (t.constant(batch.pat.clone()), t.constant(batch.mri.clone()));
            let (registered, reg) = if cfg.use_mlr {
                let moving = if cfg.use_p2m { m.synth.p2m.forward(b, pat) } else { pat };
                let phi = m.reg.forward(b, moving, mri).phi;
                let reg = regnet::registration_loss_var(&m.perc, phi, moving, mri, cfg.lambda_rev, cfg.lambda_smooth);
                let field = if cfg.joint_reg_fusion { phi } else { phi.detach() };
                (warp_var(pat, field), Some(reg))
            } else {
                (pat, None)
            };
            let fusion = m.fuse.fuse(b, registered, mri);
            let zero = t.constant(Tensor::scalar(0.0));
            let s = fusenet::stage2_fusion_loss_var(reg.unwrap_or(zero), &fusion, registered, mri, &w);
            let mut terms = vec![
                ("loss_int", s.intensity),
                ("loss_grad", s.gradient),
                ("loss_decomp", s.decomp.loss),
                ("loss_stage2", s.total),
                ("cc_base", s.decomp.cc_base),
                ("cc_detail", s.decomp.cc_detail),
            ];
            if reg.is_some() {
                terms.push(("loss_reg", s.reg));
            }
            (s.total, terms)
        })?;
        Self::record(acc, values);
        Ok(())
    }

    fn run_epochs(&mut self, epochs: usize, stage: Stage, log: &mut Vec<LossRow>) -> Result<()> {
        for _ in 0..epochs {
            let batches = self.batches()?;
            let mut acc = Accum::default();
            for (step, batch) in batches.iter().enumerate() {
                match stage {
                    Stage::Stage1 => {
                        self.synthesis_registration_steps(batch, step, &mut acc)?;
                        self.reconstruction_step(batch, step, &mut acc)?;
                    }
                    Stage::Stage2 => self.joint_step(batch, step, &mut acc)?,
                    Stage::Single => {
                        self.synthesis_registration_steps(batch, step, &mut acc)?;
                        self.joint_step(batch, step, &mut acc)?;
                    }
                    Stage::Init => unreachable!("no epochs run in the init stage"),
                }
            }
            let mut values = acc.finish();
            values.insert("lr".into(), lr_at(&self.cfg, self.epoch));
            values.insert("batches".into(), batches.len() as f64);
            log.push(LossRow {
                epoch: self.epoch,
                stage: stage.as_str().into(),
                values,
            });
            self.epoch += 1;
        }
        Ok(())
    }

    fn into_outcome(self, stage: Stage, log: Vec<LossRow>) -> TrainOutcome {
        TrainOutcome {
            checkpoint: Checkpoint {
                stage,
                epoch: self.epoch,
                config: self.cfg,
                params: self.params,
                optimizer: self.adam,
            },
            log,
        }
    }
}

fn check_data(cfg: &TrainConfig, data: &[PhantomPair]) -> Result<()> {
    if data.is_empty() {
        return Err(FuseError::Invalid("training set is empty".into()));
    }
    for p in data {
        if p.pat.height() != cfg.image_size || p.pat.width() != cfg.image_size {
            return Err(FuseError::Invalid(format!(
                "pair {} is {}x{}, config expects {}",
                p.seed,
                p.pat.height(),
                p.pat.width(),
                cfg.image_size
            )));
        }
    }
    Ok(())
}

fn trainer_from<'d>(ckpt: Checkpoint, cfg: &TrainConfig, data: &'d [PhantomPair]) -> Result<Trainer<'d>> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let model = Model::new(cfg)?;
    ckpt.check_complete(&model)?;
    Ok(Trainer {
        cfg: cfg.clone(),
        model,
        params: ckpt.params,
        adam: ckpt.optimizer,
        epoch: ckpt.epoch,
        data,
        weights: cfg.fusion_weights(),
    })
}

/// Stage I from freshly initialized parameters.
pub fn train_stage1(cfg: &TrainConfig, data: &[PhantomPair]) -> Result<TrainOutcome> {
    let mut t = trainer_from(Checkpoint::initial(cfg)?, cfg, data)?;
    let mut log = Vec::new();
    t.run_epochs(cfg.epochs_stage1, Stage::Stage1, &mut log)?;
    Ok(t.into_outcome(Stage::Stage1, log))
}

/// Stage II starting from a stage-I checkpoint. The epoch counter, and with
/// it the learning-rate schedule, continues from stage I.
pub fn train_stage2(cfg: &TrainConfig, data: &[PhantomPair], stage1: &Checkpoint) -> Result<TrainOutcome> {
    let mut t = trainer_from(stage1.clone(), cfg, data)?;
    let mut log = Vec::new();
    t.run_epochs(cfg.epochs_stage2, Stage::Stage2, &mut log)?;
    Ok(t.into_outcome(Stage::Stage2, log))
}

/// Single-stage training: synthesis, registration and the whole fusion
/// network optimized together for `epochs_stage1 + epochs_stage2` epochs.
pub fn train_single_stage(cfg: &TrainConfig, data: &[PhantomPair]) -> Result<TrainOutcome> {
    let mut t = trainer_from(Checkpoint::initial(cfg)?, cfg, data)?;
    let mut log = Vec::new();
    t.run_epochs(cfg.epochs_stage1 + cfg.epochs_stage2, Stage::Single, &mut log)?;
    Ok(t.into_outcome(Stage::Single, log))
}

/// Both stages, or the single-stage variant, as the flags say.
pub fn train(cfg: &TrainConfig, data: &[PhantomPair]) -> Result<TrainOutcome> {
    if !cfg.two_stage {
        return train_single_stage(cfg, data);
    }
    let s1 = train_stage1(cfg, data)?;
    let s2 = train_stage2(cfg, data, &s1.checkpoint)?;
    let mut log = s1.log;
    log.extend(s2.log);
    Ok(TrainOutcome {
        checkpoint: s2.checkpoint,
        log,
    })
}

// ---- inference ------------------------------------------------------------------

/// Outputs of the trained pipeline for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    /// The image registration saw as the moving input: the pseudo-MRI, or
    /// the raw PAT when synthesis is disabled.
    pub pseudo_mri: Image,
    pub field: DeformationField,
    pub registered: Image,
    pub fused: Image,
}

/// A model bound to trained parameters.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: TrainConfig,
    pub model: Model,
    pub params: ParamStore<f32>,
}

impl Pipeline {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = Model::new(&ckpt.config)?;
        ckpt.check_complete(&model)?;
        Ok(Self {
            config: ckpt.config.clone(),
            model,
            params: ckpt.params.clone(),
        })
    }

    fn check_inputs(&self, pat: &[&Image], mri: &[&Image]) -> Result<()> {
        if pat.len() != mri.len() || pat.is_empty() {
            return Err(FuseError::Invalid("need equally many PAT and MRI images".into()));
        }
        let d = 4 * self.model.reg.divisor();
        for (p, m) in pat.iter().zip(mri) {
            p.check_same_shape(m)?;
            if p.height() % d != 0 || p.width() % d != 0 {
                return Err(FuseError::Invalid(format!(
                    "{}x{} is not divisible by {d}",
                    p.height(),
                    p.width()
                )));
            }
            if p.height() < perceptual::MIN_INPUT || p.width() < perceptual::MIN_INPUT {
                return Err(FuseError::Invalid(format!(
                    "inputs must be at least {0}x{0}",
                    perceptual::MIN_INPUT
                )));
            }
        }
        Ok(())
    }

    /// Runs synthesis, registration and fusion on a batch of same-sized pairs.
    pub fn run_batch(&self, pat: &[&Image], mri: &[&Image]) -> Result<Vec<PipelineOutput>> {
        self.check_inputs(pat, mri)?;
        let cfg = &self.config;
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &self.params);
        let p = tape.constant(stack::<f32>(pat)?);
        let m = tape.constant(stack::<f32>(mri)?);
        let moving = if cfg.use_p2m { self.model.synth.p2m.forward(&b, p) } else { p };
        let (phi, registered) = if cfg.use_mlr {
            let phi = self.model.reg.forward(&b, moving, m).phi;
            (phi, warp_var(p, phi))
        } else {
            let s = p.shape();
            (tape.constant(Tensor::zeros(&[s[0], 2, s[2], s[3]])), p)
        };
        let fused = self.model.fuse.fuse(&b, registered, m).fused;
        let (mv, fv, rv, uv) = (moving.value(), phi.value(), registered.value(), fused.value());
        (0..pat.len())
            .map(|i| {
                let pseudo = if cfg.use_p2m { Modality::PseudoMri } else { Modality::Pat };
                Ok(PipelineOutput {
                    pseudo_mri: Image::from_tensor(&mv, i, pseudo)?,
                    field: DeformationField::from_tensor(&fv, i)?,
                    registered: Image::from_tensor(&rv, i, Modality::Pat)?,
                    fused: Image::from_tensor(&uv, i, Modality::Fused)?,
                })
            })
            .collect()
    }

    pub fn run(&self, pat: &Image, mri: &Image) -> Result<PipelineOutput> {
        Ok(self.run_batch(&[pat], &[mri])?.remove(0))
    }

    /// Runs every pair in chunks of the configured batch size.
    pub fn run_pairs(&self, pairs: &[PhantomPair]) -> Result<Vec<PipelineOutput>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(self.config.batch_size.max(1)) {
            let pats: Vec<&Image> = chunk.iter().map(|p| &p.pat).collect();
            let mris: Vec<&Image> = chunk.iter().map(|p| &p.mri).collect();
            out.extend(self.run_batch(&pats, &mris)?);
        }
        Ok(out)
    }
}

// ---- evaluation and ablation ------------------------------------------------------

/// Metrics of a trained pipeline on held-out phantom pairs.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Registered PAT versus MRI.
    pub registration: MetricReport,
    /// Unregistered PAT versus MRI.
    pub baseline: MetricReport,
    /// Fused images scored against the ground-truth aligned PAT and the MRI.
    pub fusion: MetricReport,
    pub outputs: Vec<PipelineOutput>,
}

/// Evaluates a pipeline on phantom pairs. Fusion metrics use the PAT warped
/// by the true field as the PAT source, so misregistration costs score.
pub fn evaluate(pipeline: &Pipeline, pairs: &[PhantomPair]) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(FuseError::Invalid("no evaluation pairs".into()));
    }
    let outputs = pipeline.run_pairs(pairs)?;
    let fields: Vec<DeformationField> = outputs.iter().map(|o| o.field.clone()).collect();
    let (registration, baseline) = metrics::evaluate_registration(pairs, &fields)?;
    let fused: Vec<Image> = outputs.iter().map(|o| o.fused.clone()).collect();
    let sources: Vec<(Image, Image)> = pairs.iter().map(|p| (p.ideal_registered_pat(), p.mri.clone())).collect();
    let fusion = metrics::evaluate_fusion(&fused, &sources)?;
    Ok(Evaluation {
        registration,
        baseline,
        fusion,
        outputs,
    })
}

/// One ablation row: which components were on and the resulting means.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub use_p2m: bool,
    pub use_mlr: bool,
    pub joint_reg_fusion: bool,
    pub two_stage: bool,
    pub evaluation: Evaluation,
}

/// A table of ablation rows with registration and fusion means.
#[derive(Clone, Debug, Default)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

fn mark(on: bool) -> &'static str {
    if on {
        "yes"
    } else {
        "no"
    }
}

impl AblationReport {
    /// Tab-free CSV: flags, then registration means, then fusion means.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "config,p2m,mlr,joint,two_stage,{},{}\n",
            metrics::REGISTRATION_COLUMNS.join(","),
            metrics::FUSION_COLUMNS.join(",")
        );
        for r in &self.rows {
            let _ = write!(
                s,
                "{},{},{},{},{}",
                r.label,
                mark(r.use_p2m),
                mark(r.use_mlr),
                mark(r.joint_reg_fusion),
                mark(r.two_stage)
            );
            for v in r.evaluation.registration.means().iter().chain(&r.evaluation.fusion.means()) {
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }
}

/// The component toggles compared by [`run_ablation`], labelled.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |p2m: bool, mlr: bool, joint: bool, two: bool| TrainConfig {
        use_p2m: p2m,
        use_mlr: mlr,
        joint_reg_fusion: joint,
        two_stage: two,
        ..base.clone()
    };
    vec![
        ("none".into(), with(false, false, true, true)),
        ("mlr_only".into(), with(false, true, true, true)),
        ("full".into(), with(true, true, true, true)),
        ("no_joint".into(), with(true, true, false, true)),
        ("single_stage".into(), with(true, true, true, false)),
    ]
}

/// Trains and evaluates one configuration.
pub fn train_and_evaluate(cfg: &TrainConfig, train_set: &[PhantomPair], test_set: &[PhantomPair]) -> Result<(TrainOutcome, Evaluation)> {
    let outcome = train(cfg, train_set)?;
    let eval = evaluate(&Pipeline::from_checkpoint(&outcome.checkpoint)?, test_set)?;
    Ok((outcome, eval))
}

/// Trains the configuration the flags describe next to the variants with
/// components removed, and tabulates their test metrics.
pub fn run_ablation(cfg: &TrainConfig, dataset: &Dataset) -> Result<AblationReport> {
    cfg.validate()?;
    let (train_set, test_set) = dataset.split(cfg.test_pairs);
    if test_set.is_empty() {
        return Err(FuseError::Invalid("ablation needs test_pairs >= 1".into()));
    }
    let mut report = AblationReport::default();
    for (label, v) in ablation_variants(cfg) {
        let (_, evaluation) = train_and_evaluate(&v, &train_set.pairs, &test_set.pairs)?;
        report.rows.push(AblationRow {
            label,
            use_p2m: v.use_p2m,
            use_mlr: v.use_mlr,
            joint_reg_fusion: v.joint_reg_fusion,
            two_stage: v.two_stage,
            evaluation,
        });
    }
    Ok(report)
}
