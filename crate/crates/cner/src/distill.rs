//! Attention-distillation losses between old- and new-model traces.
//!
//! Three variants with increasing pooling: strict elementwise matching,
//! matching after pooling one dimension group (heads, or either sequence
//! axis), and matching after pooling both sequence dimensions. Pooling is
//! summation, losses are summed over layers, and the old trace enters as a
//! constant so gradients flow only into the new model.

use crate::error::{Error, Result};
use crate::model::AttentionTrace;
use crate::tensor::{Tape, Tensor, TensorId};

fn check_compat(tape: &Tape, new_layers: &[TensorId], old: &AttentionTrace) -> Result<()> {
    if new_layers.len() != old.scores.len() {
        return Err(Error::Dimension {
            op: "distill",
            lhs: vec![new_layers.len()],
            rhs: vec![old.scores.len()],
        });
    }
    for (&new_id, old_t) in new_layers.iter().zip(&old.scores) {
        let new_shape = &tape.value(new_id).shape;
        if *new_shape != old_t.shape {
            return Err(Error::Dimension {
                op: "distill",
                lhs: new_shape.clone(),
                rhs: old_t.shape.clone(),
            });
        }
    }
    Ok(())
}

fn add_opt(tape: &mut Tape, total: Option<TensorId>, term: TensorId) -> Result<Option<TensorId>> {
    Ok(Some(match total {
        Some(t) => tape.add(t, term)?,
        None => term,
    }))
}

fn squared_diff_sum(tape: &mut Tape, a: TensorId, b: TensorId) -> Result<TensorId> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    Ok(tape.sum_all(sq))
}

/// Strict matching: sum of squared elementwise differences over every head
/// and sequence position, summed over layers.
pub fn loss_kd_on_tape(
    tape: &mut Tape,
    new_layers: &[TensorId],
    old: &AttentionTrace,
) -> Result<TensorId> {
    check_compat(tape, new_layers, old)?;
    let mut total = None;
    for (&new_id, old_t) in new_layers.iter().zip(&old.scores) {
        let old_id = tape.constant(old_t.clone());
        let term = squared_diff_sum(tape, new_id, old_id)?;
        total = add_opt(tape, total, term)?;
    }
    Ok(total.expect("at least one layer"))
}

/// Fully pooled matching: both sequence dimensions are summed away first,
/// leaving one value per head to compare.
pub fn loss_pkd_lax_on_tape(
    tape: &mut Tape,
    new_layers: &[TensorId],
    old: &AttentionTrace,
) -> Result<TensorId> {
    check_compat(tape, new_layers, old)?;
    let mut total = None;
    for (&new_id, old_t) in new_layers.iter().zip(&old.scores) {
        let old_id = tape.constant(old_t.clone());
        let pool = |tape: &mut Tape, t: TensorId| -> Result<TensorId> {
            let once = tape.sum_axis(t, 1)?; // [K, n]
            tape.sum_axis(once, 1) // [K]
        };
        let new_pooled = pool(tape, new_id)?;
        let old_pooled = pool(tape, old_id)?;
        let term = squared_diff_sum(tape, new_pooled, old_pooled)?;
        total = add_opt(tape, total, term)?;
    }
    Ok(total.expect("at least one layer"))
}

/// Balanced pooling: three terms per layer, each pooling exactly one of the
/// head dimension or a sequence dimension before comparison.
pub fn loss_pkd_on_tape(
    tape: &mut Tape,
    new_layers: &[TensorId],
    old: &AttentionTrace,
) -> Result<TensorId> {
    let (a, b, c) = loss_pkd_terms_on_tape(tape, new_layers, old)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// The three pooled terms of the balanced loss, each already summed over
/// layers: (heads pooled, query positions pooled, key positions pooled).
pub fn loss_pkd_terms_on_tape(
    tape: &mut Tape,
    new_layers: &[TensorId],
    old: &AttentionTrace,
) -> Result<(TensorId, TensorId, TensorId)> {
    check_compat(tape, new_layers, old)?;
    let mut totals: [Option<TensorId>; 3] = [None, None, None];
    for (&new_id, old_t) in new_layers.iter().zip(&old.scores) {
        let old_id = tape.constant(old_t.clone());
        for (slot, axis) in [(0usize, 0usize), (1, 1), (2, 2)] {
            let new_pooled = tape.sum_axis(new_id, axis)?;
            let old_pooled = tape.sum_axis(old_id, axis)?;
            let term = squared_diff_sum(tape, new_pooled, old_pooled)?;
            totals[slot] = add_opt(tape, totals[slot], term)?;
        }
    }
    let [a, b, c] = totals.map(|t| t.expect("at least one layer"));
    Ok((a, b, c))
}

fn value_of(
    new: &AttentionTrace,
    old: &AttentionTrace,
    build: impl FnOnce(&mut Tape, &[TensorId], &AttentionTrace) -> Result<TensorId>,
) -> Result<f64> {
    if new.mode != old.mode {
        return Err(Error::Contract(
            "attention traces captured in different modes".into(),
        ));
    }
    let mut tape = Tape::new();
    let new_ids: Vec<TensorId> = new
        .scores
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let loss = build(&mut tape, &new_ids, old)?;
    Ok(tape.scalar_value(loss))
}

pub fn loss_kd(new: &AttentionTrace, old: &AttentionTrace) -> Result<f64> {
    value_of(new, old, loss_kd_on_tape)
}

pub fn loss_pkd_lax(new: &AttentionTrace, old: &AttentionTrace) -> Result<f64> {
    value_of(new, old, loss_pkd_lax_on_tape)
}

pub fn loss_pkd(new: &AttentionTrace, old: &AttentionTrace) -> Result<f64> {
    value_of(new, old, loss_pkd_on_tape)
}

/// Values of the three balanced-loss terms.
pub fn loss_pkd_terms(new: &AttentionTrace, old: &AttentionTrace) -> Result<(f64, f64, f64)> {
    if new.mode != old.mode {
        return Err(Error::Contract(
            "attention traces captured in different modes".into(),
        ));
    }
    let mut tape = Tape::new();
    let new_ids: Vec<TensorId> = new
        .scores
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let (a, b, c) = loss_pkd_terms_on_tape(&mut tape, &new_ids, old)?;
    Ok((
        tape.scalar_value(a),
        tape.scalar_value(b),
        tape.scalar_value(c),
    ))
}

/// Test helper: wraps raw per-layer `[K, n, n]` buffers into a trace.
pub fn trace_from_raw(
    layers: Vec<(Vec<usize>, Vec<f64>)>,
    mode: crate::model::AttentionMode,
) -> Result<AttentionTrace> {
    let scores = layers
        .into_iter()
        .map(|(shape, data)| Tensor::new(shape, data))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionTrace { scores, mode })
}
