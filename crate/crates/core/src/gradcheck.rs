//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::model::{Bound, Params};
use crate::precision::{with_precision, Precision};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Elementwise relative error with the denominator floored at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::frozen();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if !v.is_scalar() {
        return Err(Error::contract("finite_diff_check: f must return a scalar"));
    }
    Ok(v.item())
}

/// Compares `backward()` against central differences for every element of
/// every tensor in `params`. Returns the maximum [`relative_error`].
///
/// Uses the fourth-order stencil at `±eps, ±2·eps`, so steps around `1e-3`
/// keep truncation error negligible while roundoff stays well under the
/// `1e-8` denominator floor.
///
/// Runs in 64-bit mode. `f` must be deterministic; two unperturbed evaluations
/// that differ make the oracle invalid.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::contract("finite_diff_check: eps must be positive"));
    }
    with_precision(Precision::F64, || {
        let params: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::new(p.shape().to_vec(), p.data().to_vec()))
            .collect();

        let base = eval(&f, &params)?;
        let again = eval(&f, &params)?;
        if base.to_bits() != again.to_bits() {
            return Err(Error::OracleInvalid(format!(
                "f is not deterministic ({base} vs {again})"
            )));
        }

        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let grads = tape.backward(out)?;

        let mut worst = 0.0f64;
        let mut probe = params.clone();
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params[k].shape()));
            for i in 0..params[k].numel() {
                let orig = params[k].data()[i];
                let mut at = |h: f64| {
                    probe[k].data_mut()[i] = orig + h;
                    eval(&f, &probe)
                };
                let (p1, p2, m1, m2) = (at(eps)?, at(2.0 * eps)?, at(-eps)?, at(-2.0 * eps)?);
                probe[k].data_mut()[i] = orig;
                let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);

                worst = worst.max(relative_error(analytic.data()[i], numeric));
            }
        }
        Ok(worst)
    })
}

/// [`finite_diff_check`] over every tensor of a model; `f` sees the bound model.
pub fn check_model<F>(params: &Params, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let tensors: Vec<Tensor> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let cfg = params.config;
    let head = params.reward_head.is_some();
    finite_diff_check(
        |tape, vars| f(tape, &Bound::from_vars(cfg, head, vars.to_vec())),
        &tensors,
        eps,
    )
}
