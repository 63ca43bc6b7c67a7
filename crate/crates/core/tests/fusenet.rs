use fusekit_core::autograd::gradcheck::check_gradients;
use fusekit_core::autograd::{Tape, Tensor};
use fusekit_core::fusenet::*;
use fusekit_core::imagedata::{Image, Modality};
use fusekit_core::params::{Binder, Init, ParamStore};
use fusekit_core::warpfield::sobel_gradient;
use fusekit_core::FuseError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(h, w, px, Modality::Pat).unwrap()
}

fn tiny() -> FuseNet {
    FuseNet::new(FuseNetConfig {
        dim: 4,
        heads: 2,
        encoder_blocks: 1,
        base_blocks: 1,
        inn_layers: 2,
        decoder_blocks: 1,
        ffn_expansion: 2,
        inn_expansion: 2,
        kv_pool: 4,
    })
    .unwrap()
}

fn params<T: fusekit_core::autograd::Real>(net: &FuseNet, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init(&mut Init {
        store: &mut store,
        rng: &mut rng,
    });
    store
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Gaussian-window SSIM over valid 11x11 windows, straight from the
/// definition.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let g = gaussian_window(11, 1.5);
    let (h, w) = (a.height(), a.width());
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0.0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i] * g[j];
                    let (u, v) = (a.at(y + i, x + j) as f64, b.at(y + i, x + j) as f64);
                    ma += k * u;
                    mb += k * v;
                    saa += k * u * u;
                    sbb += k * v * v;
                    sab += k * u * v;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn published_weights() {
    let w = FusionWeights::default();
    assert_eq!((w.alpha1, w.alpha2, w.alpha3, w.alpha4), (1.0, 2.0, 10.0, 2.0));
    assert_eq!(w.eps, 1.01);
    let c = FuseNetConfig::default();
    assert_eq!((c.dim, c.heads, c.encoder_blocks, c.decoder_blocks), (64, 8, 4, 4));
}

#[test]
fn invalid_configurations_are_rejected() {
    let base = tiny().cfg;
    for bad in [
        FuseNetConfig { dim: 5, ..base.clone() },
        FuseNetConfig { heads: 3, ..base.clone() },
        FuseNetConfig { dim: 6, heads: 2, ..base.clone() },
        FuseNetConfig { heads: 0, ..base.clone() },
        FuseNetConfig { kv_pool: 0, ..base.clone() },
    ] {
        assert!(matches!(FuseNet::new(bad), Err(FuseError::Invalid(_))));
    }
}

#[test]
fn parameters_live_under_the_three_prefixes() {
    let store = params::<f32>(&tiny(), 0);
    for p in [ENCODER, FUSION, DECODER] {
        assert!(store.names().any(|n| n.starts_with(p)), "{p}");
    }
    assert!(store
        .names()
        .all(|n| n.starts_with(ENCODER) || n.starts_with(FUSION) || n.starts_with(DECODER)));
}

#[test]
fn shapes_and_output_range() {
    let net = tiny();
    let store = params::<f64>(&net, 1);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &store);
    let pat = tape.constant(noise(16, 12, 2).to_tensor::<f64>());
    let mri = tape.constant(noise(16, 12, 3).to_tensor::<f64>());
    let out = net.fuse(&b, pat, mri);
    for d in [out.pat, out.mri] {
        for v in [d.shallow, d.base, d.detail] {
            assert_eq!(v.shape(), vec![1, 4, 16, 12]);
        }
    }
    assert_eq!(out.fused.shape(), vec![1, 1, 16, 12]);
    assert!(out.fused.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    let (_, recon) = net.reconstruct(&b, pat);
    assert_eq!(recon.shape(), vec![1, 1, 16, 12]);

    let f32_store = params::<f32>(&net, 1);
    let fused = fuse_images(&net, &f32_store, &noise(16, 12, 2), &noise(16, 12, 3)).unwrap();
    assert_eq!(fused.modality(), Modality::Fused);
    assert!(fuse_images(&net, &f32_store, &noise(16, 12, 2), &noise(16, 16, 3)).is_err());
}

#[test]
fn detail_encoder_is_exactly_invertible() {
    let net = tiny();
    let store = params::<f64>(&net, 4);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &store);
    let x = tape.constant(Tensor::uniform(&[2, 4, 8, 8], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(5)));
    let back = net.detail_encode_inverse(&b, net.detail_encode(&b, x));
    let err = back
        .value()
        .data()
        .iter()
        .zip(x.value().data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "{err}");
}

#[test]
fn attention_maps_are_row_stochastic() {
    let net = tiny();
    let store = params::<f64>(&net, 6);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &store);
    let (shallow, channel_maps) = net.feature_encode_with_attention(&b, tape.constant(noise(16, 16, 7).to_tensor()));
    let (_, spatial_maps) = net.base_encode_with_attention(&b, shallow);
    assert_eq!(channel_maps.len(), 1);
    assert_eq!(channel_maps[0].shape(), &[1, 2, 2, 2]);
    assert_eq!(spatial_maps.len(), 1);
    // 16x16 queries against (16/4)^2 pooled keys
    assert_eq!(spatial_maps[0].shape(), &[1, 2, 256, 16]);
    for m in channel_maps.iter().chain(&spatial_maps) {
        let last = *m.shape().last().unwrap();
        for row in m.data().chunks(last) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn ssim_matches_window_oracle() {
    let a = noise(16, 20, 8);
    let b = noise(16, 20, 9);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let got = ssim(&a, &b).unwrap();
    assert!((got - ssim_oracle(&a, &b)).abs() < 1e-10, "{got}");
    assert!(ssim(&noise(10, 16, 0), &noise(10, 16, 1)).is_err());
}

#[test]
fn reconstruction_loss_combines_mse_and_ssim() {
    let a = noise(16, 16, 10);
    let b = noise(16, 16, 11);
    assert_eq!(reconstruction_loss(&a, &a, 5.0).unwrap(), 0.0);
    let mse: f64 = a.pixels().iter().zip(b.pixels()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / 256.0;
    let want = mse + 5.0 * (1.0 - ssim_oracle(&a, &b));
    assert!((reconstruction_loss(&a, &b, 5.0).unwrap() - want).abs() < 1e-10);
}

#[test]
fn correlation_matches_pearson() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = Tensor::<f64>::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform(&[3, 4, 5], -1.0, 1.0, &mut rng);
    let got = correlation_coefficient(&a, &b).unwrap();
    assert!((got - pearson(a.data(), b.data())).abs() < 1e-14);
    assert!((correlation_coefficient(&a, &a).unwrap() - 1.0).abs() < 1e-14);
    assert!(matches!(
        correlation_coefficient(&a, &Tensor::full(&[3, 4, 5], 0.5)),
        Err(FuseError::Degenerate(_))
    ));
}

#[test]
fn batched_correlation_averages_per_item() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let b = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
    let tape = Tape::new();
    let got = correlation_var(tape.constant(a.clone()), tape.constant(b.clone())).item();
    let want = (pearson(&a.data()[..48], &b.data()[..48]) + pearson(&a.data()[48..], &b.data()[48..])) / 2.0;
    assert!((got - want).abs() < 1e-14);
}

#[test]
fn decomposition_loss_matches_its_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let t: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(&[1, 2, 4, 4], 0.0, 1.0, &mut rng)).collect();
    let cd = pearson(t[2].data(), t[3].data());
    let cb = pearson(t[0].data(), t[1].data());
    let want = cd * cd / (cb + 1.01);
    let got = decomposition_loss(&t[0], &t[1], &t[2], &t[3], 1.01).unwrap();
    assert!((got - want).abs() < 1e-14);
    let tape = Tape::new();
    let v: Vec<_> = t.iter().map(|x| tape.constant(x.clone())).collect();
    let terms = decomposition_terms_var(v[0], v[1], v[2], v[3], 1.01);
    assert!((terms.loss.item() - want).abs() < 1e-14);
    assert!((terms.cc_base.item() - cb).abs() < 1e-14);
    assert!((terms.cc_detail.item() - cd).abs() < 1e-14);
}

#[test]
fn fusion_losses_match_pixel_loops() {
    let (f, p, m) = (noise(12, 12, 15), noise(12, 12, 16), noise(12, 12, 17));
    let int: f64 = (0..144)
        .map(|i| (f.pixels()[i] as f64 - p.pixels()[i].max(m.pixels()[i]) as f64).abs())
        .sum::<f64>()
        / 144.0;
    assert!((fusion_intensity_loss(&f, &p, &m).unwrap() - int).abs() < 1e-12);

    let (gf, gp, gm) = (sobel_gradient(&f), sobel_gradient(&p), sobel_gradient(&m));
    let grad: f64 = (0..144)
        .map(|i| (gf.data()[i] as f64 - gp.data()[i].max(gm.data()[i]) as f64).abs())
        .sum::<f64>()
        / 144.0;
    assert!((fusion_gradient_loss(&f, &p, &m).unwrap() - grad).abs() < 1e-5);

    let mx = Image::from_fn(12, 12, Modality::Fused, |y, x| p.at(y, x).max(m.at(y, x))).unwrap();
    assert_eq!(fusion_intensity_loss(&mx, &p, &m).unwrap(), 0.0);
}

#[test]
fn stage_objectives_are_the_weighted_sums() {
    let net = tiny();
    let store = params::<f64>(&net, 18);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &store);
    let pat = tape.constant(noise(16, 16, 19).to_tensor::<f64>());
    let mri = tape.constant(noise(16, 16, 20).to_tensor::<f64>());
    let w = FusionWeights::default();
    let (dp, rp) = net.reconstruct(&b, pat);
    let (dm, rm) = net.reconstruct(&b, mri);
    let s1 = stage1_fusion_loss_var(pat, mri, rp, rm, &dp, &dm, &w);
    let want = s1.rec_pat.item() + s1.rec_mri.item() + 2.0 * s1.decomp.loss.item();
    assert!((s1.total.item() - want).abs() < 1e-12);

    let fusion = net.fuse(&b, pat, mri);
    let reg = tape.constant(Tensor::scalar(0.3));
    let s2 = stage2_fusion_loss_var(reg, &fusion, pat, mri, &w);
    let want = 0.3 + s2.intensity.item() + 10.0 * s2.gradient.item() + 2.0 * s2.decomp.loss.item();
    assert!((s2.total.item() - want).abs() < 1e-12);
}

#[test]
fn fusion_gradients_match_finite_differences() {
    let net = tiny();
    let store = params::<f64>(&net, 21);
    let inputs = [noise(8, 8, 22).to_tensor(), noise(8, 8, 23).to_tensor()];
    let r = check_gradients(
        |tape, v| {
            let b = Binder::frozen(tape, &store);
            net.fuse(&b, v[0], v[1]).fused
        },
        &inputs,
        1e-6,
        64,
    );
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let inputs: Vec<Tensor<f64>> = (24..27).map(|s| noise(12, 12, s).to_tensor()).collect();
    let r = check_gradients(|_, v| reconstruction_loss_var(v[0], v[1], 5.0), &inputs[..2], 1e-6, 96);
    assert!(r.max_rel_err < 1e-6, "{r:?}");
    let r = check_gradients(|_, v| fusion_gradient_var(v[0], v[1], v[2]), &inputs, 1e-7, 96);
    assert!(r.max_rel_err < 1e-5, "{r:?}");
    let r = check_gradients(
        |_, v| decomposition_loss_var(v[0], v[1], v[2], v[0].mul(v[1]), 1.01),
        &inputs,
        1e-6,
        96,
    );
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn decomposition_loss_is_non_negative_and_bounded(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng)).collect();
        let l = decomposition_loss(&t[0], &t[1], &t[2], &t[3], 1.01).unwrap();
        // cc^2 <= 1 and cc_base + 1.01 >= 0.01
        prop_assert!((0.0..=100.0 + 1e-9).contains(&l));
    }

    #[test]
    fn ssim_is_symmetric_and_at_most_one(seed in 0u64..10_000) {
        let a = noise(12, 12, seed);
        let b = noise(12, 12, seed + 1);
        let s = ssim(&a, &b).unwrap();
        prop_assert!(s <= 1.0 + 1e-12);
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }
}
