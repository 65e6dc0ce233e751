//! Tape-based reverse-mode automatic differentiation over dense matrices.

mod ops;
mod tape;

pub use tape::{softplus_inv, CustomBackward, Gradients, Tape, Var};
pub(crate) use tape::{sigmoid, softplus};

use crate::error::Result;
use crate::linalg::Matrix;

/// Analytic and central-difference gradients of a scalar function of several matrices.
///
/// Every evaluation runs on a fresh tape seeded with `seed`, so stochastic
/// functions are differentiated under common random numbers.
pub fn check_gradients<F>(f: F, inputs: &[Matrix], seed: u64, eps: f64) -> Result<(Vec<Matrix>, Vec<Matrix>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new(seed);
    let vars: Vec<Var<'_>> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Matrix]| -> Result<f64> {
        let tape = Tape::new(seed);
        let vars: Vec<Var<'_>> = perturbed.iter().map(|m| tape.param(m.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Matrix::zeros(inputs[k].rows(), inputs[k].cols());
        for e in 0..inputs[k].len() {
            let mut work = inputs.to_vec();
            let x0 = inputs[k].as_slice()[e];
            let h = eps * x0.abs().max(1.0);
            work[k].as_mut_slice()[e] = x0 + h;
            let up = eval(&work)?;
            work[k].as_mut_slice()[e] = x0 - h;
            let down = eval(&work)?;
            g.as_mut_slice()[e] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }
    Ok((analytic, numeric))
}

/// Largest elementwise discrepancy relative to `max(1, |numeric|)`.
pub fn gradient_discrepancy(analytic: &[Matrix], numeric: &[Matrix]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.as_slice().iter().zip(n.as_slice()))
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}
