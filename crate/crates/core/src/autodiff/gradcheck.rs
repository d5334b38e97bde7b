//! Central-difference gradient checking at double precision.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Max over elements of `|analytic - numeric| / max(1, |analytic|, |numeric|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps).map(|r| r.max())
}

pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::config(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_value(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_value(&tape, out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();
    if analytic.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite analytic gradient".into()));
    }

    let mut inputs = xs.to_vec();
    let mut per_input = Vec::with_capacity(xs.len());
    for (t, grads) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for (i, &a) in grads.iter().enumerate() {
            let orig = inputs[t].data()[i];
            inputs[t].data_mut()[i] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input })
}

fn scalar_value(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    let v = value.data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical(format!("function value {v}")));
    }
    Ok(v)
}
