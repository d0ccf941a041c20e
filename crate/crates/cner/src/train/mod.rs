//! The continual-training loop: per-step optimization of classification plus
//! distillation, pseudo-target precomputation, post-training weight fusion,
//! checkpoint chaining, and per-step evaluation.

mod optim;
mod sink;

pub use optim::{Optimizer, OptimizerKind};
pub use sink::{FileSink, NullSink, RunSink};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    EncodedSentence, EntityTypeSchedule, SlicedDataset, TaggedSentence, Vocab,
};
use crate::distill::{loss_kd_on_tape, loss_pkd_lax_on_tape, loss_pkd_on_tape};
use crate::error::{Error, Result};
use crate::fusion::{
    compute_alpha, compute_gamma, estimate_fisher, fuse_selective, fuse_vanilla, FisherMap,
    FusionPlan,
};
use crate::metrics::{extract_spans, f1_scores, Span, StepReport};
use crate::model::{derive_seed, ModelCheckpoint, TaggerConfig};
use crate::pseudo::{
    build_targets_audited, compute_thresholds, ground_truth_targets, token_weights, PseudoAudit,
    PseudoPolicy, PseudoTarget,
};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistillVariant {
    None,
    Kd,
    PkdLax,
    Pkd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionVariant {
    None,
    Vanilla,
    Selective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoVariant {
    None,
    Naive,
    Confidence,
}

/// Which anti-forgetting components a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodVariant {
    pub distill: DistillVariant,
    pub fusion: FusionVariant,
    pub pseudo: PseudoVariant,
    pub eta_weighting: bool,
}

impl MethodVariant {
    /// The full method: balanced pooled distillation, selective fusion,
    /// confidence pseudo-labeling, adaptive token weights.
    pub fn spt() -> Self {
        MethodVariant {
            distill: DistillVariant::Pkd,
            fusion: FusionVariant::Selective,
            pseudo: PseudoVariant::Confidence,
            eta_weighting: true,
        }
    }

    /// Fine-tuning lower bound: no anti-forgetting machinery at all.
    pub fn ft() -> Self {
        MethodVariant {
            distill: DistillVariant::None,
            fusion: FusionVariant::None,
            pseudo: PseudoVariant::None,
            eta_weighting: false,
        }
    }

    /// Named presets: the full method, the FT control, and the single-axis
    /// ablations of the method matrix.
    pub fn from_name(name: &str) -> Result<Self> {
        let variant = match name {
            "spt" => Self::spt(),
            "ft" => Self::ft(),
            "spt-kd" => MethodVariant {
                distill: DistillVariant::Kd,
                ..Self::spt()
            },
            "spt-pkd-lax" => MethodVariant {
                distill: DistillVariant::PkdLax,
                ..Self::spt()
            },
            "spt-no-distill" => MethodVariant {
                distill: DistillVariant::None,
                ..Self::spt()
            },
            "spt-vanilla-fusion" => MethodVariant {
                fusion: FusionVariant::Vanilla,
                ..Self::spt()
            },
            "spt-no-fusion" => MethodVariant {
                fusion: FusionVariant::None,
                ..Self::spt()
            },
            "spt-naive-pseudo" => MethodVariant {
                pseudo: PseudoVariant::Naive,
                ..Self::spt()
            },
            "spt-no-pseudo" => MethodVariant {
                pseudo: PseudoVariant::None,
                ..Self::spt()
            },
            other => {
                return Err(Error::Config(vec![format!(
                    "unknown method {other}; expected one of: spt, ft, spt-kd, spt-pkd-lax, \
                     spt-no-distill, spt-vanilla-fusion, spt-no-fusion, spt-naive-pseudo, \
                     spt-no-pseudo"
                )]))
            }
        };
        Ok(variant)
    }
}

/// Whether eta token counts are taken per training batch or once per step
/// dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EtaScope {
    #[default]
    Batch,
    Dataset,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_pg1: usize,
    pub epochs_pgn: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub method: MethodVariant,
    #[serde(default)]
    pub eta_scope: EtaScope,
    #[serde(default = "default_fisher_cap")]
    pub fisher_cap: usize,
}

fn default_fisher_cap() -> usize {
    crate::fusion::FISHER_SAMPLE_CAP
}

impl TrainConfig {
    /// Desk-scale defaults; epochs follow the PG rule (10 when PG = 1,
    /// else 20).
    pub fn desk_default(method: MethodVariant, seed: u64) -> Self {
        TrainConfig {
            lambda: 2.0,
            lr: 1e-3,
            batch_size: 8,
            epochs_pg1: 10,
            epochs_pgn: 20,
            optimizer: OptimizerKind::Adam,
            seed,
            method,
            eta_scope: EtaScope::Batch,
            fisher_cap: default_fisher_cap(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.lambda < 0.0 {
            problems.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.lr <= 0.0 {
            problems.push(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".into());
        }
        if self.epochs_pg1 == 0 || self.epochs_pgn == 0 {
            problems.push("epochs must be >= 1".into());
        }
        problems
    }

    pub fn epochs_for(&self, schedule: &EntityTypeSchedule) -> usize {
        if schedule.pg == 1 {
            self.epochs_pg1
        } else {
            self.epochs_pgn
        }
    }
}

/// One step's training input: masked train slice, masked dev view, and
/// (for t >= 2 with pseudo-labeling) precomputed target rows per sentence.
#[derive(Debug, Clone)]
pub struct StepData {
    pub train: Vec<EncodedSentence>,
    pub dev: Vec<EncodedSentence>,
    pub targets: Option<Vec<PseudoTarget>>,
}

/// Per-epoch trace of one training step.
#[derive(Debug, Clone)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub dev_scores: Vec<f64>,
    pub best_epoch: usize,
}

fn distill_builder(
    variant: DistillVariant,
) -> Option<
    fn(
        &mut Tape,
        &[crate::tensor::TensorId],
        &crate::model::AttentionTrace,
    ) -> Result<crate::tensor::TensorId>,
> {
    match variant {
        DistillVariant::None => None,
        DistillVariant::Kd => Some(loss_kd_on_tape),
        DistillVariant::PkdLax => Some(loss_pkd_lax_on_tape),
        DistillVariant::Pkd => Some(loss_pkd_on_tape),
    }
}

/// Runs the epoch loop for one step, minimizing classification loss plus
/// `lambda` times the configured distillation loss, and returns the best
/// checkpoint by dev micro-F1 over the step's own types (the final epoch's
/// checkpoint when no dev data is given).
pub fn train_step(
    model: &ModelCheckpoint,
    old_model: Option<&ModelCheckpoint>,
    data: &StepData,
    schedule: &EntityTypeSchedule,
    t: usize,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainLog)> {
    if t == 1 && old_model.is_some() {
        return Err(Error::Contract("no old model exists at step 1".into()));
    }
    if t >= 2 && old_model.is_none() && cfg.method.distill != DistillVariant::None {
        return Err(Error::Contract(
            "distillation at t >= 2 requires the previous model".into(),
        ));
    }
    if data.train.is_empty() {
        return Err(Error::Contract(format!("step {t} has no training data")));
    }

    let targets: Vec<PseudoTarget> = match &data.targets {
        Some(targets) => {
            if targets.len() != data.train.len() {
                return Err(Error::Contract(
                    "pseudo targets misaligned with the train slice".into(),
                ));
            }
            targets.clone()
        }
        None => data
            .train
            .iter()
            .map(|s| ground_truth_targets(&s.tags, &model.tag_space))
            .collect::<Result<_>>()?,
    };

    // dataset-scope eta is computed once over the whole slice
    let dataset_eta = match (cfg.method.eta_weighting, cfg.eta_scope) {
        (true, EtaScope::Dataset) => {
            Some(token_weights(&targets, &model.tag_space, schedule, t).eta)
        }
        _ => None,
    };

    let epochs = cfg.epochs_for(schedule);
    let distill = if t >= 2 {
        distill_builder(cfg.method.distill)
    } else {
        None
    };
    let current_types = schedule.types_at(t).to_vec();

    let mut current = model.clone();
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, t as u64));
    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut dev_scores = Vec::with_capacity(epochs);
    let mut best: Option<(f64, ModelCheckpoint, usize)> = None;

    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batch_count = 0;

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_targets: Vec<PseudoTarget> =
                batch.iter().map(|&i| targets[i].clone()).collect();
            let batch_eta: Vec<Vec<f64>> = match (&dataset_eta, cfg.method.eta_weighting) {
                (Some(all), _) => batch.iter().map(|&i| all[i].clone()).collect(),
                (None, true) => {
                    token_weights(&batch_targets, &current.tag_space, schedule, t).eta
                }
                (None, false) => batch
                    .iter()
                    .map(|&i| vec![1.0; data.train[i].len()])
                    .collect(),
            };

            let mut tape = Tape::new();
            let params = current.register_on_tape(&mut tape);
            let mut sentence_losses = Vec::with_capacity(batch.len());
            for (j, &i) in batch.iter().enumerate() {
                let sentence = &data.train[i];
                let handles = current.forward_on_tape(&mut tape, &params, &sentence.token_ids)?;
                let ce = tape.weighted_ce(
                    handles.log_probs,
                    &batch_targets[j].rows,
                    &batch_eta[j],
                )?;
                let loss = match (distill, old_model) {
                    (Some(build), Some(old)) => {
                        let (_, old_trace) = old.forward(&sentence.token_ids)?;
                        let dist = build(&mut tape, &handles.trace, &old_trace)?;
                        let scaled = tape.scale(dist, cfg.lambda);
                        tape.add(ce, scaled)?
                    }
                    _ => ce,
                };
                sentence_losses.push(loss);
            }
            let batch_loss = tape.mean_of(&sentence_losses)?;
            let loss_value = tape.scalar_value(batch_loss);
            if !loss_value.is_finite() {
                return Err(Error::Train {
                    step: t,
                    epoch,
                    batch: batch_idx,
                    message: format!("loss diverged to {loss_value}"),
                });
            }
            tape.backward(batch_loss)?;
            let grads: IndexMap<String, Vec<f64>> = params
                .ids
                .iter()
                .filter_map(|(name, id)| tape.grad(*id).map(|g| (name.clone(), g.to_vec())))
                .collect();
            optimizer.apply(&mut current, &grads);
            loss_sum += loss_value;
            batch_count += 1;
        }

        epoch_losses.push(loss_sum / batch_count as f64);
        if data.dev.is_empty() {
            dev_scores.push(f64::NAN);
            best = Some((0.0, current.clone(), epoch));
        } else {
            let score = dev_micro_f1(&current, &data.dev, &current_types)?;
            dev_scores.push(score);
            let improved = best.as_ref().map_or(true, |(b, _, _)| score > *b);
            if improved {
                best = Some((score, current.clone(), epoch));
            }
        }
    }

    let (_, best_model, best_epoch) = best.expect("at least one epoch ran");
    Ok((
        best_model,
        TrainLog {
            epoch_losses,
            dev_scores,
            best_epoch,
        },
    ))
}

/// Micro-F1 over the given types only; predictions of other types are
/// ignored rather than punished, since dev gold is masked to these types.
pub fn dev_micro_f1(
    model: &ModelCheckpoint,
    dev: &[EncodedSentence],
    types: &[String],
) -> Result<f64> {
    let (gold, pred) = predict_spans(model, dev)?;
    Ok(f1_scores(&gold, &pred, &[], types, 0).mi_f1_all)
}

/// Gold and predicted span sets for each sentence.
pub fn predict_spans(
    model: &ModelCheckpoint,
    sentences: &[EncodedSentence],
) -> Result<(Vec<Vec<Span>>, Vec<Vec<Span>>)> {
    let mut gold = Vec::with_capacity(sentences.len());
    let mut pred = Vec::with_capacity(sentences.len());
    for sentence in sentences {
        gold.push(extract_spans(&sentence.tags));
        let tags = model.predict_tags(&sentence.token_ids)?;
        pred.push(extract_spans(&tags));
    }
    Ok((gold, pred))
}

/// Scores a model on the test pool at step `t`.
pub fn evaluate_step(
    model: &ModelCheckpoint,
    test: &[EncodedSentence],
    schedule: &EntityTypeSchedule,
    t: usize,
) -> Result<StepReport> {
    let (gold, pred) = predict_spans(model, test)?;
    Ok(f1_scores(
        &gold,
        &pred,
        &schedule.old_types(t),
        schedule.types_at(t),
        t,
    ))
}

/// Composes Fisher importance, the dynamic factors, and the configured
/// fusion mechanism into the balanced step-t checkpoint. A missing cached
/// Fisher map is recomputed from the previous slice with a warning.
#[allow(clippy::too_many_arguments)]
pub fn fisher_then_fuse(
    old: &ModelCheckpoint,
    new: &ModelCheckpoint,
    fisher_cache: Option<&FisherMap>,
    prev_slice: &[EncodedSentence],
    schedule: &EntityTypeSchedule,
    t: usize,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, Option<FusionPlan>)> {
    if t < 2 {
        return Err(Error::Contract("fusion starts at step 2".into()));
    }
    match cfg.method.fusion {
        FusionVariant::None => Ok((new.clone(), None)),
        FusionVariant::Vanilla => {
            let alpha = compute_alpha(schedule, t)?;
            let fused = fuse_vanilla(old, new, alpha)?;
            let total: usize = old.named_weights.values().map(|w| w.numel()).sum();
            let plan = FusionPlan {
                alpha,
                gamma: 1.0,
                threshold_value: f64::NEG_INFINITY,
                selected_count: total,
                total_count: total,
                fusable_names: old.named_weights.keys().cloned().collect(),
            };
            Ok((fused, Some(plan)))
        }
        FusionVariant::Selective => {
            let alpha = compute_alpha(schedule, t)?;
            let gamma = compute_gamma(schedule, t)?;
            let recomputed;
            let fisher = match fisher_cache {
                Some(f) => f,
                None => {
                    log::warn!("no cached Fisher map for step {t}; recomputing");
                    recomputed = estimate_fisher(
                        old,
                        prev_slice,
                        cfg.fisher_cap,
                        derive_seed(cfg.seed, 0xF15 + t as u64),
                    )?;
                    &recomputed
                }
            };
            let (fused, plan) = fuse_selective(old, new, fisher, alpha, gamma)?;
            Ok((fused, Some(plan)))
        }
    }
}

fn encode_all(vocab: &Vocab, sentences: &[TaggedSentence]) -> Vec<EncodedSentence> {
    vocab.encode_all(sentences)
}

/// Runs the full continual loop over all steps of the schedule, reporting
/// to `sink` as artifacts are produced. Returns the final checkpoint and
/// the per-step test reports.
pub fn run_continual(
    data: &SlicedDataset,
    schedule: &EntityTypeSchedule,
    vocab: &Vocab,
    base_config: &TaggerConfig,
    cfg: &TrainConfig,
    sink: &mut dyn RunSink,
) -> Result<(ModelCheckpoint, Vec<StepReport>)> {
    if data.train_slices.len() != schedule.num_steps() {
        return Err(Error::Contract(format!(
            "{} train slices for {} schedule steps",
            data.train_slices.len(),
            schedule.num_steps()
        )));
    }
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let mut model = ModelCheckpoint::new(base_config.clone(), vec![crate::data::OUTSIDE.into()])?;
    let mut prev: Option<ModelCheckpoint> = None;
    let mut prev_slice: Vec<EncodedSentence> = Vec::new();
    let mut fisher_cache: Option<FisherMap> = None;
    let mut reports = Vec::with_capacity(schedule.num_steps());

    for t in 1..=schedule.num_steps() {
        model = model.expand_head(&schedule.tags_at(t))?;
        model.step_index = t;
        sink.on_step_start(t, &model)?;
        let old = prev.as_ref().map(ModelCheckpoint::clone_frozen);

        let train = encode_all(vocab, &data.train_slices[t - 1]);
        let dev = encode_all(vocab, &data.dev_view(schedule, t));

        let targets = match (&old, cfg.method.pseudo) {
            (Some(old_model), PseudoVariant::Confidence | PseudoVariant::Naive) => {
                let policy = match cfg.method.pseudo {
                    PseudoVariant::Naive => PseudoPolicy::Naive,
                    _ => PseudoPolicy::Confidence,
                };
                let stats = compute_thresholds(old_model, &train)?;
                let mut step_targets = Vec::with_capacity(train.len());
                let mut decisions = Vec::with_capacity(train.len());
                for sentence in &train {
                    let (target, decision) = build_targets_audited(
                        old_model,
                        sentence,
                        &model.tag_space,
                        &stats,
                        policy,
                    )?;
                    step_targets.push(target);
                    decisions.push(decision);
                }
                let audit =
                    PseudoAudit::from_decisions(&stats, &old.as_ref().unwrap().tag_space, &decisions);
                sink.on_pseudo_audit(t, &audit)?;
                Some(step_targets)
            }
            _ => None,
        };

        let step_data = StepData {
            train: train.clone(),
            dev,
            targets,
        };
        let (trained, log) = train_step(&model, old.as_ref(), &step_data, schedule, t, cfg)?;
        for (epoch, (loss, dev_score)) in
            log.epoch_losses.iter().zip(&log.dev_scores).enumerate()
        {
            sink.on_epoch(t, epoch + 1, *loss, *dev_score)?;
        }

        model = if t >= 2 && cfg.method.fusion != FusionVariant::None {
            let previous = prev.as_ref().expect("previous model exists at t >= 2");
            let (fused, plan) = fisher_then_fuse(
                previous,
                &trained,
                fisher_cache.as_ref(),
                &prev_slice,
                schedule,
                t,
                cfg,
            )?;
            if let Some(plan) = &plan {
                sink.on_fusion_plan(t, plan)?;
            }
            fused
        } else {
            trained
        };

        let test = encode_all(vocab, &data.test_view(schedule, t));
        let report = evaluate_step(&model, &test, schedule, t)?;
        sink.on_step_report(&report)?;
        sink.on_checkpoint(t, &model)?;
        reports.push(report);

        if cfg.method.fusion == FusionVariant::Selective && t < schedule.num_steps() {
            fisher_cache = Some(estimate_fisher(
                &model,
                &train,
                cfg.fisher_cap,
                derive_seed(cfg.seed, 0xF15 + t as u64),
            )?);
        }
        prev = Some(model.clone());
        prev_slice = train;
    }

    Ok((model, reports))
}

#[cfg(test)]
mod tests;
