use fusekit_core::autograd::gradcheck::check_gradients;
use fusekit_core::autograd::{Tape, Tensor};
use fusekit_core::imagedata::{Image, Modality};
use fusekit_core::params::{Binder, Init, ParamStore};
use fusekit_core::synthnet::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
    Image::new(h, w, px, Modality::Pat).unwrap()
}

fn tiny_net() -> SynthNet {
    let mut net = SynthNet::new(2, 2);
    net.p2m.res_blocks = 1;
    net.m2p.res_blocks = 1;
    net
}

fn params<T: fusekit_core::autograd::Real>(net: &SynthNet, seed: u64) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init(&mut Init {
        store: &mut store,
        rng: &mut rng,
    });
    store
}

fn conv_params(cout: usize, cin: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

#[test]
fn default_generator_has_nine_residual_blocks() {
    assert_eq!(RES_BLOCKS, 9);
    assert_eq!(SynthNet::new(64, 64).p2m.res_blocks, 9);
}

#[test]
fn parameter_count_matches_the_layer_list() {
    let net = SynthNet::new(4, 8);
    let store = params::<f32>(&net, 0);
    let c = 4;
    let gen = conv_params(c, 1, 7)
        + conv_params(2 * c, c, 3)
        + conv_params(4 * c, 2 * c, 3)
        + 9 * 2 * conv_params(4 * c, 4 * c, 3)
        + conv_params(2 * c, 4 * c, 3)
        + conv_params(c, 2 * c, 3)
        + conv_params(1, c, 7);
    let d = 8;
    let disc = conv_params(d, 1, 4) + conv_params(2 * d, d, 4) + conv_params(4 * d, 2 * d, 4) + conv_params(1, 4 * d, 3);
    assert_eq!(store.numel(), 2 * gen + 2 * disc);
    for prefix in [P2M, M2P, D_MRI, D_PAT] {
        assert!(store.names().any(|n| n.starts_with(prefix)), "{prefix}");
    }
    assert!(store.names().all(|n| n.starts_with("synth.")));
}

#[test]
fn generator_preserves_shape_and_stays_in_the_unit_interval() {
    let net = tiny_net();
    let store = params::<f32>(&net, 1);
    let img = noise(16, 24, 2);
    let out = p2m_generate(&net, &store, &img).unwrap();
    assert_eq!((out.height(), out.width()), (16, 24));
    assert_eq!(out.modality(), Modality::PseudoMri);
    assert!(out.pixels().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(p2m_generate(&net, &store, &noise(18, 16, 0)).is_err());
}

#[test]
fn discriminator_scores_one_eighth_grid() {
    let net = tiny_net();
    let store = params::<f32>(&net, 1);
    let s = discriminator_score(&net.d_mri, &store, &noise(32, 16, 3)).unwrap();
    assert_eq!(s.shape(), &[4, 2]);
    assert!(s.all_finite());
    assert!(discriminator_score(&net.d_mri, &store, &noise(20, 16, 3)).is_err());
}

#[test]
fn cycle_outputs_have_input_shape() {
    let net = tiny_net();
    let store = params::<f64>(&net, 4);
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &store);
    let pat = tape.constant(noise(16, 16, 5).to_tensor::<f64>());
    let mri = tape.constant(noise(16, 16, 6).to_tensor::<f64>());
    let out = net.forward(&b, pat, mri);
    for v in [out.pseudo_mri, out.pseudo_pat, out.pat_cycle, out.mri_cycle] {
        assert_eq!(v.shape(), vec![1, 1, 16, 16]);
    }
    // the cycle is the second generator applied to the first one's output
    let again = net.m2p.forward(&b, out.pseudo_mri);
    assert_eq!(again.value().data(), out.pat_cycle.value().data());
}

#[test]
fn least_squares_objectives_match_hand_values() {
    let tape = Tape::<f64>::new();
    let fake_a = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 2.0]));
    let fake_b = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 1.0]));
    // mean((s-1)^2): first direction 1, second 0; averaged over directions
    assert_eq!(lsgan_generator_loss(&[fake_a, fake_b]).item(), 0.5);
    let real = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]));
    let fake = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.5, 0.5]));
    // mean((r-1)^2) = 0.5, mean(f^2) = 0.25
    assert_eq!(lsgan_discriminator_loss(&[real], &[fake]).item(), 0.75);
}

#[test]
fn discriminator_objective_never_reaches_the_generators() {
    let net = tiny_net();
    let store = params::<f64>(&net, 7);
    let tape = Tape::new();
    let b = Binder::new(&tape, &store);
    let pat = tape.constant(noise(16, 16, 8).to_tensor::<f64>());
    let mri = tape.constant(noise(16, 16, 9).to_tensor::<f64>());
    let out = net.forward(&b, pat, mri);
    let gan = gan_losses(&net, &b, &out, pat, mri);

    let grads_d = b.gradients(&tape.backward(gan.loss_d));
    assert!(grads_d.keys().all(|k| k.starts_with(D_MRI) || k.starts_with(D_PAT)));
    assert!(grads_d.keys().any(|k| k.starts_with(D_MRI)));
    assert!(grads_d.keys().any(|k| k.starts_with(D_PAT)));

    let grads_g = b.gradients(&tape.backward(gan.loss_g));
    assert!(grads_g.keys().any(|k| k.starts_with(P2M)));
    assert!(grads_g.keys().any(|k| k.starts_with(M2P)));
}

#[test]
fn generator_gradients_match_finite_differences() {
    let net = tiny_net();
    let store = params::<f64>(&net, 11);
    let x = noise(16, 16, 12).to_tensor::<f64>();
    let r = check_gradients(
        |tape, v| {
            let b = Binder::frozen(tape, &store);
            net.p2m.forward(&b, v[0])
        },
        &[x],
        1e-6,
        64,
    );
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn discriminator_gradients_match_finite_differences() {
    let net = tiny_net();
    let store = params::<f64>(&net, 13);
    let x = noise(16, 16, 14).to_tensor::<f64>();
    let r = check_gradients(
        |tape, v| {
            let b = Binder::frozen(tape, &store);
            net.d_pat.forward(&b, v[0])
        },
        &[x],
        1e-6,
        64,
    );
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}
