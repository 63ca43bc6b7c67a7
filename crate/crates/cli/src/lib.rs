//! Command-line front end. The argument types and every command live here so
//! the binary stays a thin wrapper and the commands can be driven from tests.

pub mod dataset_dir;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use fusekit_core::imagedata::{load_image, save_image, Dataset, Image, Modality};
use fusekit_core::metrics::{self, MetricReport};
use fusekit_core::trainer::{self, Checkpoint, Pipeline, PipelineOutput, TrainConfig};
use fusekit_core::warpfield::save_field;

use crate::dataset_dir::GenSpec;

#[derive(Parser, Debug)]
#[command(name = "fusekit", version, about = "Synthesis, registration and fusion of PAT and MRI images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a phantom dataset with a checksum manifest.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoints and loss log.
    Train(TrainArgs),
    /// Synthesize and register one PAT/MRI pair.
    Register(InferArgs),
    /// Synthesize, register and fuse one PAT/MRI pair.
    Fuse(InferArgs),
    /// Score images or a checkpoint and write metric reports.
    Evaluate(EvaluateArgs),
    /// Train the configuration and its component-removed variants and
    /// tabulate their test metrics.
    Ablate(TrainArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 9)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Peak displacement of the ground-truth fields, in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub deform_magnitude: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Configuration sources, applied in order: preset, config file, flags,
/// then `key=value` overrides.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Starting preset: full, desk or smoke.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// A `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub epochs_stage1: Option<usize>,
    #[arg(long)]
    pub epochs_stage2: Option<usize>,
    /// Registration pyramid levels.
    #[arg(long)]
    pub levels: Option<usize>,
    /// Register the raw PAT image instead of a synthesized pseudo-MRI.
    #[arg(long)]
    pub no_p2m: bool,
    /// Skip registration: fuse the unregistered PAT image.
    #[arg(long)]
    pub no_mlr: bool,
    /// Keep registration out of the stage-II objective.
    #[arg(long)]
    pub no_joint: bool,
    #[arg(long)]
    pub single_stage: bool,
    /// Any config key as `key=value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text)?;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.size {
            cfg.image_size = v;
        }
        if let Some(v) = self.epochs_stage1 {
            cfg.epochs_stage1 = v;
        }
        if let Some(v) = self.epochs_stage2 {
            cfg.epochs_stage2 = v;
        }
        if let Some(v) = self.levels {
            cfg.levels = v;
        }
        cfg.use_p2m &= !self.no_p2m;
        cfg.use_mlr &= !self.no_mlr;
        cfg.joint_reg_fusion &= !self.no_joint;
        cfg.two_stage &= !self.single_stage;
        for item in &self.overrides {
            let item = item.trim_start_matches('-');
            let Some((k, v)) = item.split_once('=') else {
                bail!("override `{item}` is not key=value");
            };
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory from `gen-data`; generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub pat: PathBuf,
    #[arg(long)]
    pub mri: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Fused image to score against `--pat` and `--mri`.
    #[arg(long, requires_all = ["pat", "mri"])]
    pub fused: Option<PathBuf>,
    #[arg(long)]
    pub pat: Option<PathBuf>,
    #[arg(long)]
    pub mri: Option<PathBuf>,
    /// Registered image to score against `--fixed`.
    #[arg(long, requires = "fixed")]
    pub registered: Option<PathBuf>,
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    /// Checkpoint to run over every pair of `--data`.
    #[arg(long, requires = "data")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Register(a) => infer(&a, false),
        Command::Fuse(a) => infer(&a, true),
        Command::Evaluate(a) => evaluate(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = GenSpec {
        seed: a.seed,
        count: a.count,
        size: a.size,
        deform_magnitude: a.deform_magnitude,
    };
    let data = dataset_dir::write_dataset(&spec, &a.out)?;
    println!("wrote {} pairs to {}", data.len(), a.out.display());
    Ok(())
}

/// The training data for `cfg`: the whole directory when one is given,
/// otherwise the generated pairs minus the held-out tail.
fn load_or_generate(cfg: &mut TrainConfig, data: Option<&Path>, hold_out: bool) -> Result<Dataset> {
    match data {
        Some(dir) => {
            let d = dataset_dir::read_dataset(dir)?;
            ensure!(!d.is_empty(), "{} holds no pairs", dir.display());
            let size = d.pairs[0].pat.height();
            if size != cfg.image_size {
                eprintln!("note: using the dataset's image size {size} instead of {}", cfg.image_size);
                cfg.image_size = size;
                cfg.validate()?;
            }
            Ok(d)
        }
        None if hold_out => Ok(cfg.dataset()?.split(cfg.test_pairs).0),
        None => Ok(cfg.dataset()?),
    }
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    let data = load_or_generate(&mut cfg, a.data.as_deref(), true)?;
    create_dir(&a.out)?;
    write(&a.out.join("config.txt"), cfg.to_text())?;
    let (log, ckpt) = if cfg.two_stage {
        let s1 = trainer::train_stage1(&cfg, &data.pairs)?;
        s1.checkpoint.save(a.out.join("stage1.ckpt"))?;
        let s2 = trainer::train_stage2(&cfg, &data.pairs, &s1.checkpoint)?;
        let mut log = s1.log;
        log.extend(s2.log);
        (log, s2.checkpoint)
    } else {
        let out = trainer::train_single_stage(&cfg, &data.pairs)?;
        (out.log, out.checkpoint)
    };
    write(&a.out.join("loss_log.csv"), trainer::loss_log_csv(&log))?;
    let path = a.out.join("model.ckpt");
    ckpt.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_pipeline(ckpt: &Path, pat: &Path, mri: &Path) -> Result<PipelineOutput> {
    let pipeline = Pipeline::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let pat = load_image(pat)?.with_modality(Modality::Pat);
    let mri = load_image(mri)?.with_modality(Modality::Mri);
    Ok(pipeline.run(&pat, &mri)?)
}

fn save(img: &Image, path: &Path) -> Result<()> {
    save_image(img, path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn infer(a: &InferArgs, with_fusion: bool) -> Result<()> {
    let out = run_pipeline(&a.ckpt, &a.pat, &a.mri)?;
    create_dir(&a.out)?;
    save(&out.pseudo_mri, &a.out.join("pseudo_mri.r32f"))?;
    let field = a.out.join("field.f32d");
    save_field(&out.field, &field)?;
    println!("wrote {}", field.display());
    save(&out.registered, &a.out.join("registered.r32f"))?;
    if with_fusion {
        save(&out.fused, &a.out.join("fused.r32f"))?;
    }
    Ok(())
}

fn write_report(dir: &Path, file_stem: &str, report: &MetricReport) -> Result<()> {
    write(&dir.join(format!("{file_stem}.csv")), report.to_csv())?;
    write(&dir.join(format!("{file_stem}.txt")), report.to_key_values())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    ensure!(
        a.fused.is_some() || a.registered.is_some() || a.ckpt.is_some(),
        "nothing to evaluate: pass --fused, --registered or --ckpt"
    );
    create_dir(&a.out)?;
    if let (Some(fused), Some(pat), Some(mri)) = (&a.fused, &a.pat, &a.mri) {
        let sources = [(load_image(pat)?, load_image(mri)?)];
        let report = metrics::evaluate_fusion(&[load_image(fused)?], &sources)?;
        write_report(&a.out, "fusion", &report)?;
    }
    if let (Some(registered), Some(fixed)) = (&a.registered, &a.fixed) {
        let mut report = MetricReport::new("registered", &metrics::REGISTRATION_COLUMNS);
        report.push("img0", metrics::registration_metrics(&load_image(registered)?, &load_image(fixed)?)?)?;
        write_report(&a.out, "registration", &report)?;
    }
    if let (Some(ckpt), Some(data)) = (&a.ckpt, &a.data) {
        let pipeline = Pipeline::from_checkpoint(&Checkpoint::load(ckpt)?)?;
        let eval = trainer::evaluate(&pipeline, &dataset_dir::read_dataset(data)?.pairs)?;
        write_report(&a.out, "registration", &eval.registration)?;
        write_report(&a.out, "baseline", &eval.baseline)?;
        write_report(&a.out, "fusion", &eval.fusion)?;
    }
    Ok(())
}

pub fn ablate(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    let data = load_or_generate(&mut cfg, a.data.as_deref(), false)?;
    let report = trainer::run_ablation(&cfg, &data)?;
    create_dir(&a.out)?;
    write(&a.out.join("config.txt"), cfg.to_text())?;
    write(&a.out.join("ablation.csv"), report.to_csv())
}
