//! Central finite-difference gradient checking.
//!
//! The reference every analytic gradient in this crate is validated
//! against: perturb one parameter element at a time, re-run the loss,
//! and compare the slope to the backward pass.

use crate::error::{Error, Result};

use super::store::ParamStore;
use super::tape::Tape;
use super::tensor::Tensor;

/// Outcome of a finite-difference sweep over every trainable element.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over elements of |analytic − fd| / max(1, |analytic|).
    pub max_rel_err: f64,
    /// Parameter name and flat element index where the max occurred.
    pub worst: Option<(String, usize)>,
    /// Number of elements checked.
    pub checked: usize,
}

/// Compare analytic gradients of a scalar loss against central finite
/// differences with step `eps`, for every element of every trainable
/// parameter in `store`.
///
/// The loss function is run twice up front with identical inputs; if the
/// two values are not bit-identical the check aborts, because finite
/// differencing is meaningless for a nondeterministic function.
pub fn finite_diff_check<F>(store: &ParamStore, eps: f64, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Tensor>,
{
    let loss_a = run_scalar(&f, store)?;
    let loss_b = run_scalar(&f, store)?;
    if loss_a.to_bits() != loss_b.to_bits() {
        return Err(Error::NonDeterministic {
            a: loss_a,
            b: loss_b,
        });
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if !loss.is_scalar() {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    let grads = tape.backward(&loss)?;

    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, tensor) in store.iter_trainable() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        for idx in 0..tensor.len() {
            let mut plus = store.clone();
            plus.perturb(name, idx, eps)?;
            let mut minus = store.clone();
            minus.perturb(name, idx, -eps)?;
            let fd = (run_scalar(&f, &plus)? - run_scalar(&f, &minus)?) / (2.0 * eps);
            let a = analytic.data()[idx];
            let rel = (a - fd).abs() / a.abs().max(1.0);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.to_string(), idx));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn run_scalar<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Tensor>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    if !loss.is_scalar() {
        return Err(Error::NonScalarLoss {
            shape: loss.shape().to_vec(),
        });
    }
    Ok(loss.item())
}
