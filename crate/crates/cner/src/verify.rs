//! Finite-difference verification of every loss path through the tagger:
//! weighted cross entropy, the three attention-distillation losses, and the
//! combined training objective.

use crate::distill::{loss_kd_on_tape, loss_pkd_lax_on_tape, loss_pkd_on_tape};
use crate::error::Result;
use crate::model::{AttentionMode, ModelCheckpoint, TaggerConfig};
use crate::tensor::{grad_check_with, GradCheckReport, Tape};

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LossPathCheck {
    pub name: String,
    pub report: GradCheckReport,
}

/// Runs the finite-difference suite on a seeded two-layer, two-head, 32-wide
/// model over a five-token sentence with a masked target row and non-uniform
/// token weights. `sign_flip` is the negative-control hook: it corrupts the
/// analytic gradients so every check must fail.
pub fn loss_path_gradcheck(sign_flip: bool) -> Result<Vec<LossPathCheck>> {
    let config = TaggerConfig {
        vocab_size: 16,
        d_model: 32,
        n_layers: 2,
        n_heads: 2,
        d_ff: 64,
        max_len: 16,
        seed: 1234,
        attention_mode: AttentionMode::PreSoftmax,
    };
    let old_tags: Vec<String> = ["O", "B-X", "I-X"].iter().map(|s| s.to_string()).collect();
    let new_tags: Vec<String> = ["B-Y", "I-Y"].iter().map(|s| s.to_string()).collect();
    let old = ModelCheckpoint::new(
        TaggerConfig {
            seed: 4321,
            ..config.clone()
        },
        old_tags.clone(),
    )?
    .clone_frozen();
    let model = ModelCheckpoint::new(config, old_tags)?.expand_head(&new_tags)?;

    let token_ids = [3usize, 7, 1, 11, 5];
    let (_, old_trace) = old.forward(&token_ids)?;
    let width = model.num_tags();
    // one-hot rows for tokens 0,1,3,4; token 2 masked out of the loss
    let mut targets = vec![0.0; token_ids.len() * width];
    for (i, tag) in [(0usize, 1usize), (1, 0), (3, 3), (4, 4)] {
        targets[i * width + tag] = 1.0;
    }
    let eta = [1.0, 1.2311, 1.0, 1.5, 1.0];
    let lambda = 2.0;

    let paths: Vec<(&str, Builder)> = vec![
        ("cross_entropy", Builder::Ce),
        ("attention_kd", Builder::Distill(loss_kd_on_tape)),
        ("attention_pkd_lax", Builder::Distill(loss_pkd_lax_on_tape)),
        ("attention_pkd", Builder::Distill(loss_pkd_on_tape)),
        ("total_objective", Builder::Total(loss_pkd_on_tape)),
    ];

    let mut checks = Vec::with_capacity(paths.len());
    for (name, builder) in paths {
        let mut tape = Tape::new();
        let params = model.register_on_tape(&mut tape);
        let handles = model.forward_on_tape(&mut tape, &params, &token_ids)?;
        let loss = match builder {
            Builder::Ce => tape.weighted_ce(handles.log_probs, &targets, &eta)?,
            Builder::Distill(build) => build(&mut tape, &handles.trace, &old_trace)?,
            Builder::Total(build) => {
                let ce = tape.weighted_ce(handles.log_probs, &targets, &eta)?;
                let distill = build(&mut tape, &handles.trace, &old_trace)?;
                let scaled = tape.scale(distill, lambda);
                tape.add(ce, scaled)?
            }
        };
        let report = grad_check_with(
            &mut tape,
            loss,
            &params.named(),
            GRADCHECK_STEP,
            GRADCHECK_TOL,
            sign_flip,
        )?;
        checks.push(LossPathCheck {
            name: name.to_string(),
            report,
        });
    }
    Ok(checks)
}

type DistillBuilder = fn(
    &mut Tape,
    &[crate::tensor::TensorId],
    &crate::model::AttentionTrace,
) -> Result<crate::tensor::TensorId>;

enum Builder {
    Ce,
    Distill(DistillBuilder),
    Total(DistillBuilder),
}
