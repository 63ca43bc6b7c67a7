use fusekit_core::imagedata::{make_phantom_pair, Image, Modality};
use fusekit_core::metrics::*;
use fusekit_core::warpfield::{sobel_gradient, DeformationField};
use fusekit_core::FuseError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(h, w, px, Modality::Pat).unwrap()
}

fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Image {
    Image::from_fn(h, w, Modality::Mri, f).unwrap()
}

#[test]
fn reference_rows_match_the_published_tables() {
    assert_eq!(REFERENCE_REGISTRATION_BASELINE, [0.2807, 0.1119, 0.2096]);
    assert_eq!(REFERENCE_REGISTRATION_METHOD, [0.3082, 0.1225, 0.2900]);
    assert_eq!(REFERENCE_FUSION_METHOD, [4.2421, 0.8421, 0.7099, 0.0434, 0.9629, 0.9077, 0.3040, 0.4498]);
}

#[test]
fn mutual_information_of_hand_built_images() {
    // four equally likely grey levels: 2 bits of entropy
    let four = img(16, 16, |y, x| ((y / 4 + x / 4) % 4) as f32 / 4.0 + 0.1);
    let mi = mutual_information(&four, &four, BINS).unwrap();
    assert!((mi - 2.0).abs() < 1e-12);
    assert!((normalized_mutual_information(&four, &four).unwrap() - 1.0).abs() < 1e-12);

    // left/right halves against top/bottom halves are independent
    let lr = img(16, 16, |_, x| if x < 8 { 0.0 } else { 1.0 });
    let tb = img(16, 16, |y, _| if y < 8 { 0.0 } else { 1.0 });
    assert!(mutual_information(&lr, &tb, BINS).unwrap().abs() < 1e-12);
    assert!((mutual_information(&lr, &lr, BINS).unwrap() - 1.0).abs() < 1e-12);
    assert!(mutual_information(&lr, &tb, 0).is_err());

    let (ha, hb, hab) = entropies(&[0.0, 0.0, 1.0, 1.0], &[0.0, 1.0, 0.0, 1.0], 2);
    assert_eq!((ha, hb, hab), (1.0, 1.0, 2.0));
}

#[test]
fn nmi_of_two_constants_is_degenerate() {
    let c = Image::constant(8, 8, 0.4, Modality::Pat).unwrap();
    assert!(matches!(normalized_mutual_information(&c, &c), Err(FuseError::Degenerate(_))));
}

#[test]
fn correlation_sign_and_degeneracy() {
    let a = noise(12, 12, 1);
    let b = Image::from_fn(12, 12, Modality::Mri, |y, x| 0.5 * a.at(y, x) + 0.2).unwrap();
    let c = Image::from_fn(12, 12, Modality::Mri, |y, x| 1.0 - a.at(y, x)).unwrap();
    assert!((normalized_cross_correlation(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    assert!((normalized_cross_correlation(&a, &c).unwrap() + 1.0).abs() < 1e-6);
    let k = Image::constant(12, 12, 0.3, Modality::Mri).unwrap();
    assert!(matches!(normalized_cross_correlation(&a, &k), Err(FuseError::Degenerate(_))));
    assert!(normalized_cross_correlation(&a, &noise(12, 13, 0)).is_err());
}

#[test]
fn spatial_frequency_of_simple_patterns() {
    let checker = img(8, 8, |y, x| ((x + y) % 2) as f32);
    assert!((spatial_frequency(&checker) - 2f64.sqrt()).abs() < 1e-12);
    let stripes = img(8, 8, |_, x| (x % 2) as f32);
    assert!((spatial_frequency(&stripes) - 1.0).abs() < 1e-12);
    let ramp = img(8, 10, |_, x| x as f32 * 0.1);
    assert!((spatial_frequency(&ramp) - 0.1).abs() < 1e-7);
    assert_eq!(spatial_frequency(&Image::constant(8, 8, 0.2, Modality::Pat).unwrap()), 0.0);
}

#[test]
fn ssim_window_shrinks_to_fit() {
    assert_eq!(ssim_window_for(40, 40), 11);
    assert_eq!(ssim_window_for(8, 8), 7);
    assert_eq!(ssim_window_for(9, 20), 9);
    let a = noise(8, 8, 2);
    assert!((ssim_index(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    // on 11x11 and above it is the same measure as the training loss
    let (p, q) = (noise(16, 16, 3), noise(16, 16, 4));
    assert!((ssim_index(&p, &q).unwrap() - fusekit_core::fusenet::ssim(&p, &q).unwrap()).abs() < 1e-10);
    assert!((fusion_ssim(&p, &p, &q).unwrap() - 0.5 * (1.0 + ssim_index(&p, &q).unwrap())).abs() < 1e-12);
}

#[test]
fn vif_is_one_for_identical_and_small_for_flat_images() {
    let a = noise(32, 32, 5);
    assert!((vif(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    let flat = Image::constant(32, 32, 0.5, Modality::Pat).unwrap();
    assert!(vif(&flat, &a).unwrap() < 0.05);
    assert!(vif(&noise(16, 32, 0), &noise(16, 32, 1)).is_err());
    let b = noise(32, 32, 6);
    assert!((fusion_vif(&a, &a, &b).unwrap() - 0.5 * (vif(&a, &a).unwrap() + vif(&a, &b).unwrap())).abs() < 1e-12);
}

#[test]
fn sobel_components_agree_with_the_loss_operator() {
    // two independent implementations of the same operator
    let a = noise(10, 14, 7);
    let (gx, gy) = sobel_components(&a);
    let g = sobel_gradient(&a);
    for i in 0..140 {
        assert!(((gx[i].abs() + gy[i].abs()) - g.data()[i] as f64).abs() < 1e-5);
    }
}

#[test]
fn qabf_of_a_perfect_copy() {
    // equal strength and orientation everywhere: both sigmoids at their
    // best point
    let qg = 0.9994 / (1.0 + (-15.0f64 * 0.5).exp());
    let qa = 0.9879 / (1.0 + (-22.0f64 * 0.2).exp());
    let a = noise(16, 16, 8);
    assert!((qabf(&a, &a, &a).unwrap() - qg * qa).abs() < 1e-12);
    let flat = Image::constant(16, 16, 0.5, Modality::Pat).unwrap();
    assert_eq!(qabf(&a, &flat, &flat).unwrap(), 0.0);
    assert!(qabf(&flat, &a, &a).unwrap() < 0.01);
}

#[test]
fn dct_is_orthonormal() {
    let a = noise(16, 24, 9);
    let coeffs = dct_features(&a);
    assert_eq!(coeffs.len(), 6 * 64);
    let energy_px: f64 = a.pixels().iter().map(|&v| (v as f64).powi(2)).sum();
    let energy_dct: f64 = coeffs.iter().map(|v| v * v).sum();
    assert!((energy_px - energy_dct).abs() < 1e-9);

    let c = Image::constant(8, 8, 0.25, Modality::Pat).unwrap();
    let d = dct_features(&c);
    assert!((d[0] - 8.0 * 0.25).abs() < 1e-12);
    assert!(d[1..].iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn haar_details_of_simple_patterns() {
    let c = Image::constant(8, 8, 0.6, Modality::Pat).unwrap();
    let h = haar_features(&c);
    assert_eq!(h.len(), 3 * 16);
    assert!(h.iter().all(|&v| v.abs() < 1e-7));
    // vertical stripes only produce the second band
    let s = img(8, 8, |_, x| (x % 2) as f32);
    let h = haar_features(&s);
    assert!(h[..16].iter().all(|&v| v == 0.0));
    assert!(h[16..32].iter().all(|&v| v == -1.0));
    assert!(h[32..].iter().all(|&v| v == 0.0));
}

#[test]
fn fmi_of_a_copy_is_one() {
    let a = noise(16, 16, 10);
    for kind in [FmiFeature::Pixel, FmiFeature::Dct, FmiFeature::Wavelet] {
        assert!((fmi(&a, &a, &a, kind).unwrap() - 1.0).abs() < 1e-12, "{kind:?}");
    }
    assert_eq!(feature_nmi(&[0.5; 16], &[0.2; 16]), 0.0);
    assert!(fmi(&noise(8, 8, 0), &noise(8, 8, 1), &noise(8, 8, 2), FmiFeature::Pixel).is_err());
    assert_eq!("dct".parse::<FmiFeature>().unwrap(), FmiFeature::Dct);
    assert!("fft".parse::<FmiFeature>().is_err());
}

#[test]
fn fusion_metrics_follow_the_column_order() {
    let (f, a, b) = (noise(32, 32, 11), noise(32, 32, 12), noise(32, 32, 13));
    let m = fusion_metrics(&f, &a, &b).unwrap();
    assert_eq!(m.len(), FUSION_COLUMNS.len());
    assert_eq!(m[0], fusion_mi(&f, &a, &b).unwrap());
    assert_eq!(m[3], spatial_frequency(&f));
    assert_eq!(m[7], fmi(&f, &a, &b, FmiFeature::Wavelet).unwrap());
    let r = registration_metrics(&a, &b).unwrap();
    assert_eq!(r[2], normalized_cross_correlation(&a, &b).unwrap());
}

#[test]
fn reports_round_trip_and_validate_rows() {
    let mut r = MetricReport::new("t", &REGISTRATION_COLUMNS);
    r.push("a", vec![1.0, 0.5, 0.25]).unwrap();
    r.push("b", vec![3.0, 0.1, -0.25]).unwrap();
    assert!(r.push("c", vec![1.0]).is_err());
    assert!(r.push("c", vec![1.0, f64::NAN, 0.0]).is_err());
    assert_eq!(r.means(), vec![2.0, 0.3, 0.0]);
    assert_eq!(r.mean_of("MI"), Some(2.0));
    assert_eq!(r.column("CC"), Some(vec![0.25, -0.25]));
    assert_eq!(r.mean_of("SF"), None);
    let csv = r.to_csv();
    assert!(csv.starts_with("id,MI,NMI,CC\n"));
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
    assert_eq!(MetricReport::from_csv("t", &csv).unwrap(), r);
    assert!(MetricReport::from_csv("t", "x,MI\n").is_err());
    let kv = r.to_key_values();
    assert!(kv.contains("mean.MI=2.00000000000000000e0"));
    assert!(kv.contains("b.CC=-2.50000000000000000e-1"));
}

#[test]
fn true_fields_beat_the_misaligned_baseline() {
    let pairs: Vec<_> = (0..3).map(|s| make_phantom_pair(s, 64, 64, 4.0).unwrap()).collect();
    let fields: Vec<_> = pairs.iter().map(|p| p.true_field.clone()).collect();
    let (reg, base) = evaluate_registration(&pairs, &fields).unwrap();
    assert_eq!(reg.rows.len(), 3);
    assert!(reg.mean_of("CC").unwrap() > base.mean_of("CC").unwrap());
    assert!(reg.mean_of("MI").unwrap() > base.mean_of("MI").unwrap());

    let zeros: Vec<_> = pairs.iter().map(|_| DeformationField::zeros(64, 64)).collect();
    let (reg0, base0) = evaluate_registration(&pairs, &zeros).unwrap();
    assert_eq!(reg0.rows, base0.rows);
    assert!(evaluate_registration(&pairs, &zeros[..2]).is_err());
}

#[test]
fn fusion_evaluation_checks_lengths() {
    let a = noise(32, 32, 14);
    assert!(evaluate_fusion(std::slice::from_ref(&a), &[]).is_err());
    let r = evaluate_fusion(std::slice::from_ref(&a), &[(a.clone(), a.clone())]).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.columns, FUSION_COLUMNS);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn information_measures_are_bounded_and_symmetric(seed in 0u64..10_000) {
        let (a, b) = (noise(16, 16, seed), noise(16, 16, seed + 77));
        let mi = mutual_information(&a, &b, BINS).unwrap();
        prop_assert!((mi - mutual_information(&b, &a, BINS).unwrap()).abs() < 1e-12);
        let (ha, hb, _) = entropies(
            &a.pixels().iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &b.pixels().iter().map(|&v| v as f64).collect::<Vec<_>>(),
            BINS,
        );
        prop_assert!(mi >= 0.0 && mi <= ha.min(hb) + 1e-12);
        let nmi = normalized_mutual_information(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&nmi));
        let cc = normalized_cross_correlation(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&cc));
    }

    #[test]
    fn fusion_scores_stay_in_their_ranges(seed in 0u64..10_000) {
        let (f, a, b) = (noise(32, 32, seed), noise(32, 32, seed + 1), noise(32, 32, seed + 2));
        let m = fusion_metrics(&f, &a, &b).unwrap();
        prop_assert!(m.iter().all(|v| v.is_finite()));
        prop_assert!(m[0] >= 0.0);
        prop_assert!((0.0..=1.0).contains(&m[2]));
        prop_assert!(m[3] >= 0.0);
        for v in &m[5..] {
            prop_assert!((0.0..=1.0).contains(v));
        }
    }
}
