use std::collections::BTreeMap;

use fusekit_core::autograd::Tensor;
use fusekit_core::error::FuseError;
use fusekit_core::imagedata::Dataset;
use fusekit_core::params::ParamStore;
use fusekit_core::synthnet;
use fusekit_core::trainer::*;

fn smoke_data(cfg: &TrainConfig) -> Dataset {
    Dataset::generate(11, 4, cfg.image_size, 2.0).unwrap()
}

#[test]
fn learning_rate_halves_on_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(&cfg, 0), 1e-3);
    assert_eq!(lr_at(&cfg, 19), 1e-3);
    assert_eq!(lr_at(&cfg, 20), 5e-4);
    assert_eq!(lr_at(&cfg, 45), 2.5e-4);
}

#[test]
fn defaults_carry_the_published_schedule_and_weights() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs_stage1, c.epochs_stage2), (40, 80));
    assert_eq!((c.lr, c.lr_halve_every), (1e-3, 20));
    assert_eq!((c.alpha1, c.alpha2, c.alpha3, c.alpha4), (1.0, 2.0, 10.0, 2.0));
    assert_eq!((c.lambda_p, c.lambda_s), (1.0, 100.0));
    assert_eq!((c.lambda_rev, c.lambda_smooth), (0.2, 10.0));
    assert_eq!(c.eps, 1.01);
    assert_eq!(c.mu, 5.0);
    assert!(c.use_p2m && c.use_mlr && c.joint_reg_fusion && c.two_stage);
    let d = TrainConfig::desk();
    assert_eq!((d.epochs_stage1, d.epochs_stage2, d.image_size, d.batch_size), (8, 12, 64, 4));
}

#[test]
fn config_text_round_trips() {
    let mut cfg = TrainConfig::desk();
    cfg.set("lr", "0.000123456789").unwrap();
    cfg.set("use-p2m", "false").unwrap();
    cfg.set("use_mlr", "no").unwrap();
    cfg.set("seed", "99").unwrap();
    let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn config_text_accepts_comments_and_presets() {
    let cfg = TrainConfig::from_text("# desk run\npreset=desk\n\nseed = 7  # override\n").unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.image_size, 64);
}

#[test]
fn config_errors_are_reported() {
    let mut cfg = TrainConfig::desk();
    assert!(matches!(cfg.set("nonsense", "1"), Err(FuseError::Config(_))));
    assert!(matches!(cfg.set("lr", "fast"), Err(FuseError::Config(_))));
    assert!(matches!(TrainConfig::from_text("lr 0.1"), Err(FuseError::Config(_))));

    let bad = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = TrainConfig::desk();
        f(&mut c);
        c.validate().is_err()
    };
    assert!(bad(&|c| c.lr = 0.0));
    assert!(bad(&|c| c.alpha3 = -1.0));
    assert!(bad(&|c| c.epochs_stage2 = 0));
    assert!(bad(&|c| c.image_size = 60));
    assert!(bad(&|c| c.fuse_heads = 3));
    assert!(bad(&|c| {
        c.use_p2m = true;
        c.use_mlr = false;
    }));
    assert!(!bad(&|c| {
        c.use_p2m = false;
        c.use_mlr = false;
    }));
    TrainConfig::default().validate().unwrap();
    TrainConfig::smoke().validate().unwrap();
}

/// Textbook Adam in double precision.
fn adam_oracle(p: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let (mut m, mut v, mut p) = (0.0, 0.0, p);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        p -= lr * mhat / (vhat.sqrt() + eps);
    }
    p
}

#[test]
fn adam_matches_the_textbook_update() {
    let starts = [0.5f32, -1.25, 3.0];
    let grads = [[0.1f32, -2.0, 0.003], [0.2, 1.0, -0.004], [-0.05, 0.5, 0.001], [0.3, -0.25, 0.0]];
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(&[3], starts.to_vec()));
    let mut adam = Adam::default();
    for g in &grads {
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), Tensor::new(&[3], g.to_vec()));
        adam.step(&mut store, &map, 1e-2);
    }
    let got = store.get("w").unwrap().data().to_vec();
    for i in 0..3 {
        let gs: Vec<f64> = grads.iter().map(|g| g[i] as f64).collect();
        let want = adam_oracle(starts[i] as f64, &gs, 1e-2);
        assert!((got[i] as f64 - want).abs() < 1e-6, "param {i}: {} vs {want}", got[i]);
    }
    assert_eq!(adam.state["w"].steps, 4);
}

#[test]
fn adam_leaves_parameters_without_gradients_alone() {
    let mut store = ParamStore::new();
    store.insert("a", Tensor::new(&[2], vec![1.0f32, 2.0]));
    store.insert("b", Tensor::new(&[2], vec![3.0f32, 4.0]));
    let mut grads = BTreeMap::new();
    grads.insert("a".to_string(), Tensor::new(&[2], vec![1.0f32, 1.0]));
    let mut adam = Adam::default();
    adam.step(&mut store, &grads, 0.1);
    assert_eq!(store.get("b").unwrap().data(), &[3.0, 4.0]);
    assert!(!adam.state.contains_key("b"));
}

#[test]
fn smoke_stage1_produces_a_loadable_checkpoint() {
    let cfg = TrainConfig::smoke();
    let data = smoke_data(&cfg);
    let out = train_stage1(&cfg, &data.pairs).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.checkpoint.stage, Stage::Stage1);
    assert_eq!(out.checkpoint.epoch, 1);
    let row = &out.log[0];
    for k in ["loss_d", "loss_gan", "loss_pst", "loss_reg", "loss_rec_pat", "loss_rec_mri", "loss_decomp", "loss_stage1"] {
        assert!(row.get(k).unwrap().is_finite(), "{k}");
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.fkcp");
    out.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), out.checkpoint.to_bytes());
    assert_eq!(back.config, cfg);
    assert_eq!(back.optimizer, out.checkpoint.optimizer);
    for (name, t) in out.checkpoint.params.iter() {
        assert_eq!(back.params.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn checkpoint_reload_reproduces_the_pipeline_bit_for_bit() {
    let cfg = TrainConfig::smoke();
    let data = smoke_data(&cfg);
    let ckpt = train_stage1(&cfg, &data.pairs).unwrap().checkpoint;
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    let a = Pipeline::from_checkpoint(&ckpt).unwrap().run_pairs(&data.pairs).unwrap();
    let b = Pipeline::from_checkpoint(&back).unwrap().run_pairs(&data.pairs).unwrap();
    assert_eq!(a, b);
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let cfg = TrainConfig::smoke();
    let data = smoke_data(&cfg);
    let a = train(&cfg, &data.pairs).unwrap();
    let b = train(&cfg, &data.pairs).unwrap();
    assert_eq!(loss_log_csv(&a.log), loss_log_csv(&b.log));
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn stage2_never_touches_the_generator() {
    let cfg = TrainConfig::smoke();
    let data = smoke_data(&cfg);
    let s1 = train_stage1(&cfg, &data.pairs).unwrap();
    let s2 = train_stage2(&cfg, &data.pairs, &s1.checkpoint).unwrap();
    for prefix in [synthnet::P2M, synthnet::M2P, synthnet::D_MRI, synthnet::D_PAT] {
        assert_eq!(
            s1.checkpoint.params.digest(prefix),
            s2.checkpoint.params.digest(prefix),
            "{prefix}"
        );
    }
    assert_ne!(s1.checkpoint.params.digest("fuse."), s2.checkpoint.params.digest("fuse."));
    assert_ne!(s1.checkpoint.params.digest("reg."), s2.checkpoint.params.digest("reg."));
    assert_eq!(s2.checkpoint.stage, Stage::Stage2);
    assert_eq!(s2.log[0].epoch, 1);
    assert_eq!(s2.log[0].stage, "stage2");
}

#[test]
fn stage2_rejects_incomplete_checkpoints() {
    let cfg = TrainConfig::smoke();
    let data = smoke_data(&cfg);
    let mut ckpt = Checkpoint::initial(&cfg).unwrap();
    let mut pruned = ParamStore::new();
    for (n, t) in ckpt.params.iter() {
        if !n.starts_with("fuse.fusion.") {
            pruned.insert(n, t.clone());
        }
    }
    ckpt.params = pruned;
    let err = train_stage2(&cfg, &data.pairs, &ckpt).unwrap_err();
    assert!(matches!(err, FuseError::Checkpoint(ref m) if m.contains("fusenet.fusion")), "{err}");

    let bytes = Checkpoint::initial(&cfg).unwrap().to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"NOPE").is_err());
}

#[test]
fn empty_training_set_is_an_error() {
    let cfg = TrainConfig::smoke();
    assert!(matches!(train_stage1(&cfg, &[]), Err(FuseError::Invalid(_))));
}

#[test]
fn diverging_training_aborts_with_a_diagnostic() {
    let mut cfg = TrainConfig::smoke();
    cfg.lr = 1e30;
    let data = smoke_data(&cfg);
    match train(&cfg, &data.pairs) {
        Err(FuseError::NonFinite { term, .. }) => assert!(!term.is_empty()),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.log)),
    }
}

#[test]
fn loss_log_has_one_row_per_epoch_with_named_columns() {
    let mut cfg = TrainConfig::smoke();
    cfg.epochs_stage2 = 2;
    let data = smoke_data(&cfg);
    let out = train(&cfg, &data.pairs).unwrap();
    let csv = loss_log_csv(&out.log);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(&header[..2], &["epoch", "stage"]);
    assert_eq!(&header[2..], &LOSS_COLUMNS[..]);
    for (i, l) in lines[1..].iter().enumerate() {
        assert_eq!(l.split(',').count(), header.len());
        assert!(l.starts_with(&format!("{i},")));
    }
    assert!(out.log[2].get("loss_stage2").is_some());
    assert!(out.log[2].get("loss_stage1").is_none());
}

#[test]
fn disabling_registration_fuses_the_unaligned_pair() {
    let mut cfg = TrainConfig::smoke();
    cfg.use_p2m = false;
    cfg.use_mlr = false;
    let data = smoke_data(&cfg);
    let out = train(&cfg, &data.pairs).unwrap();
    assert!(out.log.iter().all(|r| r.get("loss_reg").is_none()));
    let pipe = Pipeline::from_checkpoint(&out.checkpoint).unwrap();
    let eval = evaluate(&pipe, &data.pairs).unwrap();
    for (o, p) in eval.outputs.iter().zip(&data.pairs) {
        assert_eq!(o.registered, p.pat.clone().with_modality(o.registered.modality()));
        assert_eq!(o.field.max_norm(), 0.0);
    }
    assert_eq!(eval.registration.means(), eval.baseline.means());
}

#[test]
fn every_ablation_variant_trains() {
    let cfg = TrainConfig::smoke();
    let data = smoke_data(&cfg);
    let variants = ablation_variants(&cfg);
    let labels: Vec<&str> = variants.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["none", "mlr_only", "full", "no_joint", "single_stage"]);
    assert_eq!(variants[2].1, cfg);
    for (label, v) in &variants {
        let out = train(v, &data.pairs).unwrap();
        assert_eq!(out.log.len(), 2, "{label}");
        assert!(out.checkpoint.params.all_finite(), "{label}");
    }
}

#[test]
fn ablation_report_lists_every_variant() {
    let mut cfg = TrainConfig::smoke();
    cfg.pairs = 5;
    cfg.test_pairs = 1;
    let data = cfg.dataset().unwrap();
    let report = run_ablation(&cfg, &data).unwrap();
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines[0].starts_with("config,p2m,mlr,joint,two_stage,MI,NMI,CC,MI,VIF"));
    assert!(lines[1].starts_with("none,no,no,yes,yes,"));
}
