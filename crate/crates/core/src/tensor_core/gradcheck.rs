//! Central finite differences, used as the reference for analytic gradients.
//!
//! The numeric side only ever evaluates forward values; the analytic side
//! comes from [`Tape::backward`].

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Step used by the gradient checks in 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// Below this magnitude gradients are compared absolutely instead of
/// relatively, so exact zeros do not blow up the ratio.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference<E>(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64, E>,
) -> Result<Vec<f64>, E> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

/// Builds a graph on a fresh tape from leaf inputs and returns a scalar.
pub trait GraphBuilder: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>> GraphBuilder for F {}

fn evaluate(inputs: &[Tensor<f64>], build: &impl GraphBuilder, with_grad: bool) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(with_grad)))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &vars)?;
    Ok((tape, vars, loss))
}

/// Largest relative error between tape gradients and central differences
/// over every element of every input.
pub fn check_gradients(inputs: &[Tensor<f64>], build: impl GraphBuilder) -> Result<f64> {
    let (mut tape, vars, loss) = evaluate(inputs, &build, true)?;
    tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = central_difference(inputs[i].data(), FD_STEP, |x| {
            let mut probe = inputs.to_vec();
            probe[i].data_mut().copy_from_slice(x);
            let (tape, _, loss) = evaluate(&probe, &build, false)?;
            Ok::<_, crate::Error>(tape.value(loss).data()[0])
        })?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
