//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; a single reverse
//! sweep then accumulates gradients for every node flagged as trainable.
//! The operation set is small on purpose: affine maps, elementwise
//! nonlinearities, row-wise softmax families, reductions, and the fused
//! Gaussian KL used by the variational branches.

mod tape;
mod tensor;

pub use tape::{Activation, Gradients, Reduction, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Compares analytic gradients against central differences.
///
/// `f` builds a scalar loss from the parameter variables. Returns the maximum
/// over all parameter elements of `|analytic − numeric| / max(1, |analytic|)`.
/// Any randomness inside `f` must be frozen; two forward passes are compared
/// bit-for-bit first.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("eps {eps} outside (0, 1e-2]")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.scalar(loss)
    };

    let first = eval(params)?;
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::UnreliableCheck { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::Contract("parameter received no gradient".into()))?;
        for j in 0..work[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
