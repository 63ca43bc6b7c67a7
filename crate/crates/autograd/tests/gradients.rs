//! Every differentiable op checked against central differences in f64.

use fusekit_autograd::gradcheck::check_gradients;
use fusekit_autograd::{concat, Conv2dSpec, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// Values bounded away from zero, for ops with kinks or poles there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    rnd(shape, seed).map(|v| if v >= 0.0 { v + 0.3 } else { v - 0.3 })
}

fn positive(shape: &[usize], seed: u64) -> Tensor<f64> {
    rnd(shape, seed).map(|v| v.abs() + 0.5)
}

fn assert_grad<F>(name: &str, f: F, inputs: &[Tensor<f64>])
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let r = check_gradients(f, inputs, H, 64);
    assert!(r.max_rel_err < TOL, "{name}: rel err {:.3e} at {:?}", r.max_rel_err, r.worst);
}

#[test]
fn smooth_unary_ops() {
    let x = [rnd(&[2, 3, 4], 1)];
    assert_grad("neg", |_, v| v[0].neg(), &x);
    assert_grad("exp", |_, v| v[0].exp(), &x);
    assert_grad("tanh", |_, v| v[0].tanh(), &x);
    assert_grad("sigmoid", |_, v| v[0].sigmoid(), &x);
    assert_grad("gelu", |_, v| v[0].gelu(), &x);
    assert_grad("softplus", |_, v| v[0].softplus(), &x);
    assert_grad("square", |_, v| v[0].square(), &x);
    assert_grad("add_scalar", |_, v| v[0].add_scalar(0.7), &x);
    assert_grad("mul_scalar", |_, v| v[0].mul_scalar(-1.3), &x);
    let p = [positive(&[2, 5], 2)];
    assert_grad("ln", |_, v| v[0].ln(), &p);
    assert_grad("sqrt", |_, v| v[0].sqrt(), &p);
    assert_grad("powf", |_, v| v[0].powf(1.7), &p);
}

#[test]
fn piecewise_unary_ops() {
    let x = [away_from_zero(&[3, 7], 3)];
    assert_grad("relu", |_, v| v[0].relu(), &x);
    assert_grad("leaky_relu", |_, v| v[0].leaky_relu(0.2), &x);
    assert_grad("abs", |_, v| v[0].abs(), &x);
    // keep clear of the clamp bounds at +-0.5
    let c = [rnd(&[3, 7], 4).map(|v| if (v.abs() - 0.5).abs() < 0.05 { v * 1.3 } else { v })];
    assert_grad("clamp", |_, v| v[0].clamp(-0.5, 0.5), &c);
    let r6 = [rnd(&[40], 5).map(|v| v * 4.0 + 1.0).map(|v| {
        if v.abs() < 0.05 || (v - 6.0).abs() < 0.05 { v + 0.2 } else { v }
    })];
    assert_grad("relu6", |_, v| v[0].relu6(), &r6);
}

#[test]
fn broadcasting_binary_ops() {
    let a = rnd(&[2, 3, 4], 6);
    let b = rnd(&[3, 1], 7);
    let pair = [a.clone(), b.clone()];
    assert_grad("add", |_, v| v[0].add(v[1]), &pair);
    assert_grad("sub", |_, v| v[0].sub(v[1]), &pair);
    assert_grad("mul", |_, v| v[0].mul(v[1]), &pair);
    assert_grad("div", |_, v| v[0].div(v[1]), &[a.clone(), positive(&[3, 1], 8)]);
    let c = rnd(&[2, 3, 4], 9).zip_map(&a, |x, y| if (x - y).abs() < 0.05 { x + 0.2 } else { x });
    assert_grad("maximum", |_, v| v[0].maximum(v[1]), &[a.clone(), c.clone()]);
    assert_grad("minimum", |_, v| v[0].minimum(v[1]), &[a.clone(), c]);
    assert_grad("broadcast_to", |_, v| v[0].broadcast_to(&[2, 3, 4]), &[b]);
}

#[test]
fn reductions_and_softmax() {
    let x = [rnd(&[2, 3, 4], 10)];
    assert_grad("sum_all", |_, v| v[0].sum_all(), &x);
    assert_grad("mean_all", |_, v| v[0].mean_all(), &x);
    assert_grad("sum_axis", |_, v| v[0].sum_axis(1, false), &x);
    assert_grad("mean_axis", |_, v| v[0].mean_axis(2, true), &x);
    assert_grad("mean_axes", |_, v| v[0].mean_axes_keepdim(&[1, 2]), &x);
    assert_grad("softmax", |_, v| v[0].softmax_last(), &x);
}

#[test]
fn shape_ops() {
    let x = [rnd(&[2, 3, 4], 11)];
    assert_grad("reshape", |_, v| v[0].reshape(&[6, 4]).mul(v[0].reshape(&[6, 4])), &x);
    assert_grad("permute", |_, v| v[0].permute(&[2, 0, 1]).square(), &x);
    assert_grad("transpose", |_, v| v[0].transpose(0, 2).exp(), &x);
    assert_grad("narrow", |_, v| v[0].narrow(2, 1, 2).square(), &x);
    let parts = [rnd(&[2, 1, 4], 12), rnd(&[2, 3, 4], 13)];
    assert_grad("concat", |_, v| concat(&[v[0], v[1]], 1).square(), &parts);
    assert_grad(
        "split",
        |_, v| {
            let s = v[0].split(1, &[1, 2]);
            s[0].mul(s[1].narrow(1, 1, 1))
        },
        &x,
    );
}

#[test]
fn matrix_products() {
    let a = rnd(&[2, 3, 5], 14);
    let b = rnd(&[2, 5, 4], 15);
    let bt = rnd(&[2, 4, 5], 16);
    assert_grad("matmul", |_, v| v[0].matmul(v[1]), &[a.clone(), b]);
    assert_grad("matmul_t", |_, v| v[0].matmul_t(v[1]), &[a, bt]);
}

#[test]
fn convolutions() {
    let cases = [
        ([1, 2, 6, 5], [3, 2, 3, 3], Conv2dSpec::new(1, 1)),
        ([2, 2, 8, 8], [2, 2, 4, 4], Conv2dSpec::new(2, 1)),
        ([1, 3, 7, 7], [4, 3, 3, 3], Conv2dSpec::new(2, 1)),
        ([1, 4, 5, 5], [4, 1, 3, 3], Conv2dSpec::new(1, 1).with_groups(4)),
        ([1, 4, 5, 5], [2, 2, 1, 1], Conv2dSpec::new(1, 0).with_groups(2)),
    ];
    for (i, (xs, ws, spec)) in cases.into_iter().enumerate() {
        let inputs = [rnd(&xs, 20 + i as u64), rnd(&ws, 30 + i as u64), rnd(&[ws[0]], 40 + i as u64)];
        assert_grad(
            "conv2d",
            move |_, v| v[0].conv2d(v[1], Some(v[2]), spec),
            &inputs,
        );
    }
}

#[test]
fn spatial_ops() {
    let x = [rnd(&[1, 2, 6, 6], 50)];
    assert_grad("avg_pool2d", |_, v| v[0].avg_pool2d(2).square(), &x);
    assert_grad("upsample", |_, v| v[0].upsample_nearest2d(2).square(), &x);
    assert_grad("pad_replicate", |_, v| v[0].pad_replicate(2).square(), &x);
    assert_grad("instance_norm", |_, v| v[0].instance_norm(1e-5).exp(), &x);
    assert_grad("channel_norm", |_, v| v[0].channel_norm(1e-5).exp(), &x);
}

#[test]
fn composite_graph_with_shared_subexpressions() {
    let inputs = [rnd(&[1, 2, 4, 4], 60), rnd(&[2, 2, 3, 3], 61)];
    assert_grad(
        "composite",
        |_, v| {
            let y = v[0].conv2d(v[1], None, Conv2dSpec::same(3)).tanh();
            let z = y.mul(v[0]).add(y.instance_norm(1e-5));
            z.sum_axis(1, true).sigmoid().mean_all()
        },
        &inputs,
    );
}
