//! Central finite-difference checks for tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default step for [`grad_check`].
pub const DEFAULT_STEP: f64 = 1e-4;

fn evaluate<F>(builder: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = builder(&tape, &vars)?;
    if root.value().len() != 1 {
        return Err(Error::Contract(format!(
            "loss builder must return a scalar, got {:?}",
            root.shape()
        )));
    }
    Ok(root.item())
}

/// Analytic gradients of the scalar built by `builder` with respect to each input.
pub fn analytic_grads<F>(builder: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = builder(&tape, &vars)?;
    tape.backward(root)?;
    Ok(vars.iter().map(|v| v.grad()).collect())
}

/// Central-difference gradients with step `h`.
pub fn numeric_grads<F>(builder: &F, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let (r, c) = inputs[i].shape();
        let mut g = Tensor::zeros(r, c);
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = evaluate(builder, &work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = evaluate(builder, &work)?;
            work[i].data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
pub fn max_rel_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compares tape gradients against central differences with step `h` and
/// returns the maximum relative error.
///
/// The builder is evaluated twice on the unperturbed inputs first; differing
/// results are reported as a contract violation since finite differences are
/// meaningless for a non-deterministic function.
pub fn grad_check<F>(builder: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Domain {
            op: "grad_check",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let first = evaluate(&builder, inputs)?;
    let second = evaluate(&builder, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "loss builder is not deterministic: {first} vs {second}"
        )));
    }
    let analytic = analytic_grads(&builder, inputs)?;
    let numeric = numeric_grads(&builder, inputs, h)?;
    Ok(max_rel_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn linear_loss_is_exact() {
        let w = Tensor::from_rows(&[[0.5, -1.5, 2.0]]).unwrap();
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let err = grad_check(|_, v| v[0].mul(v[1])?.sum(), &[w, x], 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_non_deterministic_builder() {
        let calls = Cell::new(0.0);
        let x = Tensor::scalar(1.0);
        let res = grad_check(
            |_, v| {
                calls.set(calls.get() + 1.0);
                Ok(v[0].add_scalar(calls.get()))
            },
            &[x],
            1e-4,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|_, v| v[0].sum(), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
