use std::collections::BTreeMap;

use super::*;
use crate::data::{build_schedule, greedy_slice, synth_corpus, SynthSpec};
use crate::tensor::Tape;

/// Captures run events for assertions.
#[derive(Default)]
struct CaptureSink {
    epochs: Vec<(usize, usize, f64, f64)>,
    step_starts: Vec<ModelCheckpoint>,
    step_finals: Vec<ModelCheckpoint>,
    reports: Vec<StepReport>,
}

impl RunSink for CaptureSink {
    fn on_epoch(&mut self, t: usize, epoch: usize, loss: f64, dev_score: f64) -> Result<()> {
        self.epochs.push((t, epoch, loss, dev_score));
        Ok(())
    }

    fn on_step_start(&mut self, _t: usize, model: &ModelCheckpoint) -> Result<()> {
        self.step_starts.push(model.clone());
        Ok(())
    }

    fn on_step_report(&mut self, report: &StepReport) -> Result<()> {
        self.reports.push(report.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, _t: usize, model: &ModelCheckpoint) -> Result<()> {
        self.step_finals.push(model.clone());
        Ok(())
    }
}

fn two_type_spec(mentions: usize) -> SynthSpec {
    let gazetteer: BTreeMap<String, Vec<String>> = [
        (
            "LOC".to_string(),
            vec!["paris".into(), "tokyo".into(), "oslo".into(), "cairo".into()],
        ),
        (
            "PER".to_string(),
            vec!["alice".into(), "bob".into(), "carol".into(), "david".into()],
        ),
    ]
    .into_iter()
    .collect();
    SynthSpec {
        templates: vec![
            "{PER} visited {LOC} today".into(),
            "{PER} spoke quietly".into(),
            "{LOC} stayed calm".into(),
            "{PER} met {PER} near {LOC}".into(),
        ],
        gazetteer,
        counts: [("LOC".to_string(), mentions), ("PER".to_string(), mentions)]
            .into_iter()
            .collect(),
    }
}

fn fixture(mentions: usize) -> (SlicedDataset, EntityTypeSchedule, Vocab) {
    let spec = two_type_spec(mentions);
    let train = synth_corpus(&spec, 1).unwrap().sentences;
    let dev = synth_corpus(&two_type_spec(mentions / 2 + 2), 2).unwrap().sentences;
    let test = synth_corpus(&two_type_spec(mentions / 2 + 2), 3).unwrap().sentences;
    let types = crate::data::collect_types(&train);
    let schedule = build_schedule(&types, 1, 1, None).unwrap();
    let sliced = greedy_slice(&train, &schedule, 7).unwrap().with_pools(dev, test);
    let mut all = train;
    all.extend(sliced.dev_pool.iter().cloned());
    all.extend(sliced.test_pool.iter().cloned());
    let vocab = Vocab::build(&all);
    (sliced, schedule, vocab)
}

fn small_tagger(vocab: &Vocab, seed: u64) -> TaggerConfig {
    TaggerConfig {
        vocab_size: vocab.size(),
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 16,
        seed,
        attention_mode: Default::default(),
    }
}

fn quick_cfg(method: MethodVariant, seed: u64) -> TrainConfig {
    TrainConfig {
        lambda: 1.0,
        lr: 2e-3,
        batch_size: 4,
        epochs_pg1: 3,
        epochs_pgn: 3,
        optimizer: OptimizerKind::Adam,
        seed,
        method,
        eta_scope: EtaScope::Batch,
        fisher_cap: 64,
    }
}

#[test]
fn single_sgd_step_matches_hand_update() {
    let (data, schedule, vocab) = fixture(8);
    let model = ModelCheckpoint::new(small_tagger(&vocab, 5), vec!["O".into()])
        .unwrap()
        .expand_head(&schedule.tags_at(1))
        .unwrap();
    let train = vocab.encode_all(&data.train_slices[0][..1]);
    let cfg = TrainConfig {
        lambda: 0.0,
        lr: 0.05,
        batch_size: 8,
        epochs_pg1: 1,
        epochs_pgn: 1,
        optimizer: OptimizerKind::Sgd,
        seed: 3,
        method: MethodVariant::ft(),
        eta_scope: EtaScope::Batch,
        fisher_cap: 64,
    };
    let step_data = StepData {
        train: train.clone(),
        dev: vec![],
        targets: None,
    };
    let (trained, log) = train_step(&model, None, &step_data, &schedule, 1, &cfg).unwrap();
    assert_eq!(log.epoch_losses.len(), 1);

    // independent single-batch gradient
    let mut tape = Tape::new();
    let params = model.register_on_tape(&mut tape);
    let sentence = &train[0];
    let handles = model
        .forward_on_tape(&mut tape, &params, &sentence.token_ids)
        .unwrap();
    let target = ground_truth_targets(&sentence.tags, &model.tag_space).unwrap();
    let eta = vec![1.0; sentence.len()];
    let ce = tape
        .weighted_ce(handles.log_probs, &target.rows, &eta)
        .unwrap();
    let loss = tape.mean_of(&[ce]).unwrap();
    tape.backward(loss).unwrap();

    for (name, id) in params.ids.iter() {
        let grad = tape.grad(*id).unwrap();
        let before = &model.named_weights[name].data;
        let after = &trained.named_weights[name].data;
        for i in 0..grad.len() {
            assert_eq!(after[i], before[i] - 0.05 * grad[i], "{name}[{i}]");
        }
    }
}

#[test]
fn zero_lambda_matches_pure_ce_training_bitwise() {
    let (data, schedule, vocab) = fixture(10);
    let tagger = small_tagger(&vocab, 11);

    let mut with_distill = quick_cfg(
        MethodVariant {
            distill: DistillVariant::Pkd,
            fusion: FusionVariant::None,
            pseudo: PseudoVariant::None,
            eta_weighting: false,
        },
        21,
    );
    with_distill.lambda = 0.0;
    let plain = TrainConfig {
        method: MethodVariant::ft(),
        ..with_distill.clone()
    };

    let mut sink_a = CaptureSink::default();
    let (_, reports_a) =
        run_continual(&data, &schedule, &vocab, &tagger, &with_distill, &mut sink_a).unwrap();
    let mut sink_b = CaptureSink::default();
    let (_, reports_b) =
        run_continual(&data, &schedule, &vocab, &tagger, &plain, &mut sink_b).unwrap();

    assert_eq!(sink_a.epochs, sink_b.epochs, "loss curves must bit-match");
    assert_eq!(reports_a, reports_b);
}

#[test]
fn training_loss_decreases_on_synthetic_data() {
    let (data, schedule, vocab) = fixture(14);
    let model = ModelCheckpoint::new(small_tagger(&vocab, 2), vec!["O".into()])
        .unwrap()
        .expand_head(&schedule.tags_at(1))
        .unwrap();
    let mut cfg = quick_cfg(MethodVariant::ft(), 5);
    cfg.epochs_pg1 = 5;
    let step_data = StepData {
        train: vocab.encode_all(&data.train_slices[0]),
        dev: vec![],
        targets: None,
    };
    let (_, log) = train_step(&model, None, &step_data, &schedule, 1, &cfg).unwrap();
    assert!(log.epoch_losses.iter().all(|l| l.is_finite()));
    assert!(
        log.epoch_losses.last().unwrap() < log.epoch_losses.first().unwrap(),
        "{:?}",
        log.epoch_losses
    );
}

#[test]
fn old_model_is_never_mutated_by_training() {
    let (data, schedule, vocab) = fixture(8);
    let old = ModelCheckpoint::new(small_tagger(&vocab, 9), vec!["O".into()])
        .unwrap()
        .expand_head(&schedule.tags_at(1))
        .unwrap();
    let frozen = old.clone_frozen();
    let snapshot: Vec<Vec<f64>> = frozen
        .named_weights
        .values()
        .map(|t| t.data.clone())
        .collect();

    let model = frozen.expand_head(&schedule.tags_at(2)).unwrap();
    let mut trainable = model.clone();
    for t in trainable.named_weights.values_mut() {
        t.requires_grad = true;
    }
    let step_data = StepData {
        train: vocab.encode_all(&data.train_slices[1]),
        dev: vec![],
        targets: None,
    };
    let cfg = quick_cfg(
        MethodVariant {
            distill: DistillVariant::Pkd,
            fusion: FusionVariant::None,
            pseudo: PseudoVariant::None,
            eta_weighting: false,
        },
        4,
    );
    train_step(&trainable, Some(&frozen), &step_data, &schedule, 2, &cfg).unwrap();
    for (tensor, before) in frozen.named_weights.values().zip(&snapshot) {
        assert_eq!(&tensor.data, before);
    }
}

#[test]
fn single_step_schedule_collapses_old_new_metrics() {
    let spec = two_type_spec(8);
    let train = synth_corpus(&spec, 1).unwrap().sentences;
    let pool = synth_corpus(&spec, 2).unwrap().sentences;
    let types = crate::data::collect_types(&train);
    let schedule = build_schedule(&types, 2, 1, None).unwrap();
    assert_eq!(schedule.num_steps(), 1);
    let sliced = greedy_slice(&train, &schedule, 0)
        .unwrap()
        .with_pools(pool.clone(), pool);
    let vocab = Vocab::build(sliced.train_slices[0].iter());
    let tagger = small_tagger(&vocab, 1);
    let cfg = quick_cfg(MethodVariant::spt(), 2);
    let (_, reports) =
        run_continual(&sliced, &schedule, &vocab, &tagger, &cfg, &mut NullSink).unwrap();
    assert_eq!(reports.len(), 1);
    assert!(reports[0].ma_f1_old.is_none());
    assert_eq!(reports[0].ma_f1_new, reports[0].ma_f1_all);
    let summary = crate::metrics::run_averages(&reports).unwrap();
    assert_eq!(summary.avg_mi_f1_all, reports[0].mi_f1_all);
    assert!(summary.avg_ma_f1_old.is_none());
}

#[test]
fn identical_config_and_seed_reproduce_reports_exactly() {
    let (data, schedule, vocab) = fixture(10);
    let tagger = small_tagger(&vocab, 3);
    let cfg = quick_cfg(MethodVariant::spt(), 17);
    let (_, a) = run_continual(&data, &schedule, &vocab, &tagger, &cfg, &mut NullSink).unwrap();
    let (_, b) = run_continual(&data, &schedule, &vocab, &tagger, &cfg, &mut NullSink).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ft_equals_spt_with_everything_disabled() {
    let (data, schedule, vocab) = fixture(10);
    let tagger = small_tagger(&vocab, 3);
    let cfg_ft = quick_cfg(MethodVariant::ft(), 13);
    let disabled = MethodVariant {
        distill: DistillVariant::None,
        fusion: FusionVariant::None,
        pseudo: PseudoVariant::None,
        eta_weighting: false,
    };
    let cfg_disabled = quick_cfg(disabled, 13);
    let (_, a) = run_continual(&data, &schedule, &vocab, &tagger, &cfg_ft, &mut NullSink).unwrap();
    let (_, b) =
        run_continual(&data, &schedule, &vocab, &tagger, &cfg_disabled, &mut NullSink).unwrap();
    assert_eq!(a, b);
}

#[test]
fn step_initial_weights_chain_from_previous_final() {
    let (data, schedule, vocab) = fixture(10);
    let tagger = small_tagger(&vocab, 3);
    let cfg = quick_cfg(MethodVariant::spt(), 29);
    let mut sink = CaptureSink::default();
    run_continual(&data, &schedule, &vocab, &tagger, &cfg, &mut sink).unwrap();
    assert_eq!(sink.step_starts.len(), sink.step_finals.len());
    for t in 1..sink.step_starts.len() {
        let start = &sink.step_starts[t];
        let prev_final = &sink.step_finals[t - 1];
        for (name, tensor) in &prev_final.named_weights {
            if name.starts_with("classifier") {
                // classifier grows; old rows must be the prefix
                let grown = &start.named_weights[name];
                assert_eq!(&grown.data[..tensor.numel()], &tensor.data[..]);
            } else {
                assert_eq!(&start.named_weights[name].data, &tensor.data, "{name}");
            }
        }
    }
}

#[test]
fn evaluation_never_scores_future_types() {
    let (data, schedule, vocab) = fixture(10);
    let tagger = small_tagger(&vocab, 3);
    let cfg = quick_cfg(MethodVariant::ft(), 7);
    let (_, reports) =
        run_continual(&data, &schedule, &vocab, &tagger, &cfg, &mut NullSink).unwrap();
    for (i, report) in reports.iter().enumerate() {
        let t = i + 1;
        let seen = schedule.types_up_to(t);
        for ty in report.per_type_f1.keys() {
            assert!(seen.contains(ty), "step {t} scored unseen type {ty}");
        }
    }
}

#[test]
fn fisher_then_fuse_variant_dispatch() {
    let (data, schedule, vocab) = fixture(8);
    let old = ModelCheckpoint::new(small_tagger(&vocab, 1), vec!["O".into()])
        .unwrap()
        .expand_head(&schedule.tags_at(1))
        .unwrap();
    let new = old.expand_head(&schedule.tags_at(2)).unwrap();
    let prev_slice = vocab.encode_all(&data.train_slices[0]);

    let mut cfg = quick_cfg(MethodVariant::ft(), 0);
    let (fused, plan) =
        fisher_then_fuse(&old, &new, None, &prev_slice, &schedule, 2, &cfg).unwrap();
    assert!(plan.is_none());
    for (name, t) in &fused.named_weights {
        assert_eq!(t.data, new.named_weights[name].data, "{name}");
    }

    cfg.method.fusion = FusionVariant::Vanilla;
    let (fused, plan) =
        fisher_then_fuse(&old, &new, None, &prev_slice, &schedule, 2, &cfg).unwrap();
    let alpha = compute_alpha(&schedule, 2).unwrap();
    let expect = fuse_vanilla(&old, &new, alpha).unwrap();
    assert_eq!(plan.unwrap().alpha, alpha);
    for (name, t) in &fused.named_weights {
        assert_eq!(t.data, expect.named_weights[name].data, "{name}");
    }

    // selective without a cache recomputes Fisher and matches a manual pass
    cfg.method.fusion = FusionVariant::Selective;
    let (fused, plan) =
        fisher_then_fuse(&old, &new, None, &prev_slice, &schedule, 2, &cfg).unwrap();
    let plan = plan.unwrap();
    let fisher = estimate_fisher(
        &old,
        &prev_slice,
        cfg.fisher_cap,
        derive_seed(cfg.seed, 0xF15 + 2),
    )
    .unwrap();
    let gamma = compute_gamma(&schedule, 2).unwrap();
    let (expect, expect_plan) = fuse_selective(&old, &new, &fisher, alpha, gamma).unwrap();
    assert_eq!(plan.selected_count, expect_plan.selected_count);
    assert_eq!(plan.threshold_value, expect_plan.threshold_value);
    for (name, t) in &fused.named_weights {
        assert_eq!(t.data, expect.named_weights[name].data, "{name}");
    }
}

#[test]
fn selective_fusion_matches_checkpoint_level_brute_force() {
    let (data, schedule, vocab) = fixture(8);
    let old = ModelCheckpoint::new(small_tagger(&vocab, 31), vec!["O".into()])
        .unwrap()
        .expand_head(&schedule.tags_at(1))
        .unwrap();
    let new = old.expand_head(&schedule.tags_at(2)).unwrap();
    let prev_slice = vocab.encode_all(&data.train_slices[0]);
    let fisher = estimate_fisher(&old, &prev_slice, 64, 0).unwrap();
    let (alpha, gamma) = (0.4, 0.37);
    let (fused, plan) = fuse_selective(&old, &new, &fisher, alpha, gamma).unwrap();

    // brute force: flatten in old weight order, rank, apply the rule per index
    let mut flat: Vec<f64> = Vec::new();
    for name in old.named_weights.keys() {
        flat.extend_from_slice(&fisher.entries[name].data);
    }
    let k = (gamma * flat.len() as f64).round() as usize;
    let mut sorted = flat.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = sorted[k - 1];
    assert_eq!(plan.threshold_value, threshold);

    let mut offset = 0;
    for (name, old_t) in &old.named_weights {
        let new_t = &new.named_weights[name];
        let fused_t = &fused.named_weights[name];
        for i in 0..old_t.numel() {
            let expect = if flat[offset + i] >= threshold {
                alpha * old_t.data[i] + (1.0 - alpha) * new_t.data[i]
            } else {
                new_t.data[i]
            };
            assert_eq!(fused_t.data[i], expect, "{name}[{i}]");
        }
        // grown classifier rows keep new values
        for i in old_t.numel()..new_t.numel() {
            assert_eq!(fused_t.data[i], new_t.data[i]);
        }
        offset += old_t.numel();
    }
}

#[test]
fn method_presets_round_trip() {
    assert_eq!(MethodVariant::from_name("spt").unwrap(), MethodVariant::spt());
    assert_eq!(MethodVariant::from_name("ft").unwrap(), MethodVariant::ft());
    assert!(MethodVariant::from_name("bogus").is_err());
    let kd = MethodVariant::from_name("spt-kd").unwrap();
    assert_eq!(kd.distill, DistillVariant::Kd);
    assert_eq!(kd.fusion, FusionVariant::Selective);
}
