//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Worst relative error observed for one named parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

/// Compares the tape gradient of `loss` w.r.t. each named leaf against
/// central finite differences with the given step, element by element.
///
/// The tape must already contain the fully built loss. Relative error uses
/// `|a - b| / max(1, |a|, |b|)` so near-zero gradients do not self-amplify
/// rounding noise.
pub fn grad_check(
    tape: &mut Tape,
    loss: TensorId,
    params: &[(String, TensorId)],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_with(tape, loss, params, step, tol, false)
}

/// Like [`grad_check`], with a negative-control hook: `sign_flip` negates the
/// analytic gradients before comparison, which must make any non-degenerate
/// check fail. Only tests should set it.
pub fn grad_check_with(
    tape: &mut Tape,
    loss: TensorId,
    params: &[(String, TensorId)],
    step: f64,
    tol: f64,
    sign_flip: bool,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {}",
            step
        )));
    }
    tape.zero_grads();
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(name, id)| {
            tape.grad(*id)
                .map(|g| {
                    let sign = if sign_flip { -1.0 } else { 1.0 };
                    g.iter().map(|v| v * sign).collect::<Vec<f64>>()
                })
                .ok_or_else(|| Error::Contract(format!("parameter {} has no gradient", name)))
        })
        .collect::<Result<_>>()?;

    let mut entries = Vec::with_capacity(params.len());
    for ((name, id), grads) in params.iter().zip(&analytic) {
        let mut worst = 0.0f64;
        for i in 0..grads.len() {
            let original = tape.leaf_data_mut(*id)[i];
            tape.leaf_data_mut(*id)[i] = original + step;
            tape.replay();
            let plus = tape.scalar_value(loss);
            tape.leaf_data_mut(*id)[i] = original - step;
            tape.replay();
            let minus = tape.scalar_value(loss);
            tape.leaf_data_mut(*id)[i] = original;
            let fd = (plus - minus) / (2.0 * step);
            let rel = (fd - grads[i]).abs() / 1.0f64.max(fd.abs()).max(grads[i].abs());
            worst = worst.max(rel);
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: worst,
        });
    }
    tape.replay();
    Ok(GradCheckReport { entries, tol })
}
