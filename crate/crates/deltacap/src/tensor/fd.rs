//! Central finite-difference probing of scalar-valued tape graphs.
//!
//! Only the forward pass is exercised here, so the numbers it produces
//! are independent of the backward rules they are checked against.

use super::{Tape, TensorId};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Evaluate `build` as a plain function of the given inputs.
fn eval<F>(build: &F, inputs: &[Vec<f64>], shapes: &[Vec<usize>]) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .zip(shapes)
        .map(|(data, shape)| tape.constant(data.clone(), shape.clone()).unwrap())
        .collect();
    let loss = build(&mut tape, &ids);
    tape.value(loss)[0]
}

/// Central-difference gradient of `build` w.r.t. every input element.
pub fn numeric_grads<F>(build: &F, inputs: &[Vec<f64>], shapes: &[Vec<usize>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut g = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i][j] += h;
            let mut minus = inputs.to_vec();
            minus[i][j] -= h;
            g[j] = (eval(build, &plus, shapes) - eval(build, &minus, shapes)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Error of `a` against reference `b`, relative above unit magnitude and
/// absolute below it.
pub fn scaled_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst-case scaled error between reverse-mode and central-difference
/// gradients of `build` over all inputs. The loss must be scalar.
pub fn check_grads<F>(build: F, inputs: &[Vec<f64>], shapes: &[Vec<usize>]) -> f64
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .zip(shapes)
        .map(|(data, shape)| tape.leaf(data.clone(), shape.clone()).unwrap())
        .collect();
    let loss = build(&mut tape, &ids);
    tape.backward(loss).expect("backward failed in gradient check");
    let numeric = numeric_grads(&build, inputs, shapes, FD_STEP);
    let mut worst = 0.0f64;
    for (id, num) in ids.iter().zip(&numeric) {
        let ad = tape.grad(*id).expect("tracked leaf has no gradient");
        for (&a, &n) in ad.iter().zip(num) {
            worst = worst.max(scaled_err(a, n));
        }
    }
    worst
}
