//! Central-difference gradient verification (64-bit only).

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Relative error as `|a - n| / max(|a|, |n|, 1e-12)`, maximised over every
/// element of every input.
pub fn max_relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            assert_eq!(a.shape(), n.shape());
            a.data().iter().zip(n.data()).map(|(&a, &n)| {
                let denom = a.abs().max(n.abs()).max(1e-12);
                (a - n).abs() / denom
            })
        })
        .fold(0.0, f64::max)
}

/// Gradients of the scalar built by `f` with respect to each input, by
/// reverse-mode differentiation.
pub fn analytic_gradients<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v)).collect())
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Central differences `(f(x+h) - f(x-h)) / 2h`, one element at a time.
pub fn numeric_gradients<F>(f: &F, inputs: &[Tensor<f64>], step: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[which].shape());
        for e in 0..inputs[which].len() {
            let orig = work[which].data()[e];
            work[which].data_mut()[e] = orig + step;
            let plus = evaluate(f, &work)?;
            work[which].data_mut()[e] = orig - step;
            let minus = evaluate(f, &work)?;
            work[which].data_mut()[e] = orig;
            g.data_mut()[e] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `f` over all inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, inputs)?;
    let numeric = numeric_gradients(&f, inputs, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}
