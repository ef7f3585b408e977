//! Central finite-difference checks for tape gradients.
//!
//! The error reported for a coordinate is
//! `|analytic − numeric| / max(1, |numeric|)`, and a check returns the
//! maximum over the coordinates it visits.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_loss<F>(f: &mut F, inputs: &[Tensor]) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::invalid("gradcheck", "function must return a scalar"));
    }
    Ok(v.data()[0])
}

/// Analytic gradients of `f` at `inputs`, one buffer per input.
pub fn analytic_gradients<F>(f: &mut F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| alloc::vec![0.0; t.numel()]))
        .collect())
}

/// Checks the listed `(input, flat index)` coordinates.
pub fn check_coords<F>(mut f: F, inputs: &[Tensor], coords: &[(usize, usize)], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradients(&mut f, inputs)?;
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let up = eval_loss(&mut f, &work)?;
        work[i].data_mut()[j] = orig - eps;
        let down = eval_loss(&mut f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i][j], numeric));
    }
    Ok(worst)
}

/// Checks every coordinate of every input.
pub fn check_inputs<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    check_coords(f, inputs, &coords, eps)
}

/// Single-input form: max relative error of `d f / d x` over all coordinates.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    check_inputs(|t, v| f(t, v[0]), core::slice::from_ref(x), eps)
}
