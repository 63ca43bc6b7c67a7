//! Finite-difference verification of analytic gradients.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check: the worst discrepancy found.
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over all probed entries.
    pub max_rel_err: f64,
    /// Input index and flat element index where it occurred.
    pub worst: (usize, usize),
}

/// Compares reverse-mode gradients of a scalar projection of `f` against
/// central differences with step `h`.
///
/// The output of `f` is contracted with fixed pseudo-random weights so that
/// every output element contributes. At most `max_probes` elements per input
/// are perturbed, spread evenly over the buffer.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], h: f64, max_probes: usize) -> GradReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let project = |out: &Tensor<f64>| -> Tensor<f64> {
        let w: Vec<f64> = (0..out.numel())
            .map(|i| 0.5 + ((i as f64) * 0.618_034).fract())
            .collect();
        Tensor::new(out.shape(), w)
    };
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&tape, &vars).value();
        let w = project(&out);
        out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = f(&tape, &vars);
    let seed = project(&out.value());
    let grads = tape.backward_with(out, seed);

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var);
        let n = inputs[i].numel();
        let step = n.div_ceil(max_probes.max(1)).max(1);
        for k in (0..n).step_by(step) {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + h;
            let up = eval(&probe);
            probe[i].data_mut()[k] = orig - h;
            let down = eval(&probe);
            probe[i].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_rel_err {
                report = GradReport {
                    max_rel_err: err,
                    worst: (i, k),
                };
            }
        }
    }
    report
}
