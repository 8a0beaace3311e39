//! Finite-difference helpers shared by unit tests.

use crate::graph::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Fixed pseudo-random weights for reducing an output to a scalar.
pub fn probe_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((i * 7919 % 97) as f64 / 97.0) - 0.4)
        .collect()
}

/// Compares tape gradients of `sum(w * build(...))` against central differences
/// for every component of the listed parameters. Returns the worst relative error.
pub fn param_fd_error(
    store: &ParamStore,
    params: &[ParamId],
    build: impl Fn(&mut Tape, &ParamStore) -> Var,
    h: f64,
) -> f64 {
    let mut tape = Tape::new();
    let y = build(&mut tape, store);
    let weights = probe_weights(tape.value(y).len());
    let grads = tape.backward_seeded(&[(y, Tensor::new(tape.shape(y), weights.clone()))]);
    let mut analytic = store.zero_grads();
    grads.accumulate_params(&tape, &mut analytic);

    let eval = |s: &ParamStore| {
        let mut tape = Tape::new();
        let y = build(&mut tape, s);
        tape.value(y)
            .data()
            .iter()
            .zip(&weights)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for &id in params {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(&probe);
            probe.get_mut(id).data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = analytic.get(id)[i];
            // tiny gradients are judged on an absolute scale
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
        }
    }
    worst
}
