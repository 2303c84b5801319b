//! Central finite-difference gradient checking (64-bit only).

use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Max relative error between the analytic gradient of `f` at `x` and the
/// central difference with step `h`. `f` must be pure: it rebuilds the same
/// computation from a fresh leaf every call and returns a scalar node.
///
/// Relative error per element is |analytic - fd| / max(|analytic|, |fd|, 1e-8).
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> f64
where
    F: Fn(&mut Tape<f64>, TensorId) -> TensorId,
{
    let eval = |xt: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let id = tape.leaf(xt.clone(), false);
        let loss = f(&mut tape, id);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let id = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, id);
    let grads = tape.backward(loss);
    let analytic = grads
        .get(id)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe);
        probe.data_mut()[i] = orig;

        let fd = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-8));
        max_rel = max_rel.max(rel);
    }
    max_rel
}
