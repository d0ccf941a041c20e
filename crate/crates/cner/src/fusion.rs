//! Fisher-information weight importance and old/new checkpoint fusion.
//!
//! After training step t, the previous checkpoint's weights are merged back
//! into the new one: either wholesale with a dynamic factor alpha, or
//! selectively for the top-gamma fraction of old weights ranked by diagonal
//! empirical Fisher information. Classifier rows added at step t exist only
//! in the new model and are never fused.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{EncodedSentence, EntityTypeSchedule};
use crate::error::{Error, Result};
use crate::model::ModelCheckpoint;
use crate::tensor::{Tape, Tensor};

/// Default cap on sentences sampled for Fisher estimation.
pub const FISHER_SAMPLE_CAP: usize = 2048;

/// Per-weight non-negative importance, shaped like the old checkpoint.
#[derive(Debug, Clone)]
pub struct FisherMap {
    pub entries: IndexMap<String, Tensor>,
}

impl FisherMap {
    pub fn total_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }
}

/// Record of one fusion: the dynamic factors, the TopK cut, and how many
/// old weights were selected.
#[derive(Debug, Clone, Serialize)]
pub struct FusionPlan {
    pub alpha: f64,
    pub gamma: f64,
    pub threshold_value: f64,
    pub selected_count: usize,
    pub total_count: usize,
    pub fusable_names: Vec<String>,
}

/// `alpha = 1 - sqrt(E^t / (sum_{m<=t} E^m + 1))`.
pub fn alpha_from_counts(e_t: usize, cumulative: usize) -> f64 {
    1.0 - (e_t as f64 / (cumulative as f64 + 1.0)).sqrt()
}

/// `gamma = sigmoid(-(E^t - sum_{m<t} E^m - 1) / (sum_{m<=t} E^m + 1))`.
pub fn gamma_from_counts(e_t: usize, cumulative_prev: usize, cumulative: usize) -> f64 {
    let exponent = (e_t as f64 - cumulative_prev as f64 - 1.0) / (cumulative as f64 + 1.0);
    1.0 / (1.0 + exponent.exp())
}

pub fn compute_alpha(schedule: &EntityTypeSchedule, t: usize) -> Result<f64> {
    if t < 1 || t > schedule.num_steps() {
        return Err(Error::Contract(format!(
            "alpha: step {t} outside 1..={}",
            schedule.num_steps()
        )));
    }
    Ok(alpha_from_counts(
        schedule.type_count_at(t),
        schedule.cumulative_count(t),
    ))
}

pub fn compute_gamma(schedule: &EntityTypeSchedule, t: usize) -> Result<f64> {
    if t < 2 || t > schedule.num_steps() {
        return Err(Error::Contract(format!(
            "gamma: step {t} outside 2..={}",
            schedule.num_steps()
        )));
    }
    Ok(gamma_from_counts(
        schedule.type_count_at(t),
        schedule.cumulative_count(t - 1),
        schedule.cumulative_count(t),
    ))
}

/// Diagonal empirical Fisher: the mean over sampled tokens of the squared
/// gradient of the per-token cross-entropy against the ground-truth tag.
/// Sentences beyond `cap` are dropped by a seeded subsample that preserves
/// corpus order.
pub fn estimate_fisher(
    model: &ModelCheckpoint,
    data: &[EncodedSentence],
    cap: usize,
    seed: u64,
) -> Result<FisherMap> {
    if data.is_empty() {
        return Err(Error::Contract(
            "fisher estimation needs a non-empty sample".into(),
        ));
    }
    let sample: Vec<&EncodedSentence> = if data.len() > cap {
        let mut indices: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        indices.truncate(cap);
        indices.sort_unstable();
        indices.iter().map(|&i| &data[i]).collect()
    } else {
        data.iter().collect()
    };

    let mut accum: IndexMap<String, Vec<f64>> = model
        .named_weights
        .iter()
        .map(|(name, t)| (name.clone(), vec![0.0; t.numel()]))
        .collect();
    let mut token_count = 0usize;

    for sentence in &sample {
        let mut tape = Tape::new();
        let params = model.register_on_tape(&mut tape);
        let handles = model.forward_on_tape(&mut tape, &params, &sentence.token_ids)?;
        for (i, tag) in sentence.tags.iter().enumerate() {
            let idx = model.tag_index(tag).ok_or_else(|| {
                Error::Schedule(format!("tag {tag} not in the model tag space"))
            })?;
            let mut onehot = vec![0.0; model.num_tags()];
            onehot[idx] = 1.0;
            let row = tape.row(handles.log_probs, i)?;
            let ce = tape.cross_entropy_row(row, &onehot)?;
            tape.zero_grads();
            tape.backward(ce)?;
            for (name, id) in params.ids.iter() {
                if let Some(grad) = tape.grad(*id) {
                    let acc = accum.get_mut(name).expect("accumulator per weight");
                    for (a, g) in acc.iter_mut().zip(grad) {
                        *a += g * g;
                    }
                }
            }
            token_count += 1;
        }
    }

    let entries = accum
        .into_iter()
        .map(|(name, mut values)| {
            for v in &mut values {
                *v /= token_count as f64;
            }
            let shape = model.named_weights[&name].shape.clone();
            (name, Tensor { shape, data: values, requires_grad: false, grad: None })
        })
        .collect();
    Ok(FisherMap { entries })
}

/// How the old weight region maps into the new tensor: full overlap, or an
/// old-rows prefix of a grown classifier.
fn fusable_len(name: &str, old: &Tensor, new: &Tensor) -> Result<usize> {
    if old.shape == new.shape {
        return Ok(old.numel());
    }
    let prefix_compatible = !old.shape.is_empty()
        && old.shape.len() == new.shape.len()
        && old.shape[1..] == new.shape[1..]
        && old.shape[0] < new.shape[0];
    if prefix_compatible {
        Ok(old.numel())
    } else {
        Err(Error::Checkpoint(format!(
            "weight {name} has incompatible shapes {:?} vs {:?}",
            old.shape, new.shape
        )))
    }
}

fn fuse_checkpoints(
    old: &ModelCheckpoint,
    new: &ModelCheckpoint,
    alpha: f64,
    selected: Option<&[bool]>,
) -> Result<ModelCheckpoint> {
    let mut fused = new.clone();
    let mut offset = 0;
    for (name, old_t) in &old.named_weights {
        let new_t = new.named_weights.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("weight {name} missing from the new checkpoint"))
        })?;
        let len = fusable_len(name, old_t, new_t)?;
        let out = fused.named_weights.get_mut(name).expect("present in clone");
        for i in 0..len {
            let take = selected.map_or(true, |mask| mask[offset + i]);
            if take {
                out.data[i] = alpha * old_t.data[i] + (1.0 - alpha) * new_t.data[i];
            }
        }
        offset += len;
    }
    Ok(fused)
}

/// Uniform fusion of every fusable weight: `alpha*old + (1-alpha)*new`.
/// Weights absent from the old checkpoint keep their new values.
pub fn fuse_vanilla(
    old: &ModelCheckpoint,
    new: &ModelCheckpoint,
    alpha: f64,
) -> Result<ModelCheckpoint> {
    fuse_checkpoints(old, new, alpha, None)
}

/// TopK selection over a flat Fisher vector: `k = round(gamma * len)`, the
/// threshold is the k-th largest value, and every position with importance
/// `>=` the threshold is selected (ties may select more than k).
#[derive(Debug, Clone)]
pub struct Selection {
    pub k: usize,
    pub threshold: f64,
    pub mask: Vec<bool>,
    pub selected_count: usize,
}

pub fn select_important(fisher: &[f64], gamma: f64) -> Result<Selection> {
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::Contract(format!(
            "gamma must lie in (0,1), got {gamma}"
        )));
    }
    let k = (gamma * fisher.len() as f64).round() as usize;
    if k == 0 {
        log::warn!("selective fusion: k rounded to 0, keeping pure new weights");
        return Ok(Selection {
            k: 0,
            threshold: f64::INFINITY,
            mask: vec![false; fisher.len()],
            selected_count: 0,
        });
    }
    let mut sorted = fisher.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).expect("fisher values are finite"));
    let threshold = sorted[k - 1];
    let mask: Vec<bool> = fisher.iter().map(|&f| f >= threshold).collect();
    let selected_count = mask.iter().filter(|&&m| m).count();
    Ok(Selection {
        k,
        threshold,
        mask,
        selected_count,
    })
}

/// Weight-guided selective fusion: only old weights whose Fisher importance
/// reaches the global TopK threshold are merged; the rest keep new values.
pub fn fuse_selective(
    old: &ModelCheckpoint,
    new: &ModelCheckpoint,
    fisher: &FisherMap,
    alpha: f64,
    gamma: f64,
) -> Result<(ModelCheckpoint, FusionPlan)> {
    let mut flat = Vec::with_capacity(fisher.total_count());
    let mut fusable_names = Vec::with_capacity(old.named_weights.len());
    for (name, old_t) in &old.named_weights {
        let fisher_t = fisher.entries.get(name).ok_or_else(|| {
            Error::Contract(format!("fisher map missing weight {name}"))
        })?;
        if fisher_t.shape != old_t.shape {
            return Err(Error::Dimension {
                op: "fuse_selective",
                lhs: fisher_t.shape.clone(),
                rhs: old_t.shape.clone(),
            });
        }
        flat.extend_from_slice(&fisher_t.data);
        fusable_names.push(name.clone());
    }

    let selection = select_important(&flat, gamma)?;
    let fused = fuse_checkpoints(old, new, alpha, Some(&selection.mask))?;
    let plan = FusionPlan {
        alpha,
        gamma,
        threshold_value: selection.threshold,
        selected_count: selection.selected_count,
        total_count: flat.len(),
        fusable_names,
    };
    Ok((fused, plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_schedule;
    use crate::model::{ModelCheckpoint, TaggerConfig};

    fn schedule(fg: usize, pg: usize, total: usize) -> EntityTypeSchedule {
        let names: Vec<String> = (0..total).map(|i| format!("T{i:02}")).collect();
        build_schedule(&names, fg, pg, None).unwrap()
    }

    #[test]
    fn alpha_matches_hand_values() {
        // FG-8-PG-2 at t=2: 1 - sqrt(2/11)
        let s = schedule(8, 2, 16);
        let a = compute_alpha(&s, 2).unwrap();
        assert!((a - 0.5736).abs() < 1e-4);
        // FG-1-PG-1 at t=2: 1 - sqrt(1/3)
        let s = schedule(1, 1, 4);
        let a = compute_alpha(&s, 2).unwrap();
        assert!((a - 0.4226).abs() < 1e-4);
    }

    #[test]
    fn alpha_boundary_hits_zero() {
        // hypothetical single giant step: E^t == cumulative + 1
        assert_eq!(alpha_from_counts(5, 4), 0.0);
    }

    #[test]
    fn gamma_matches_hand_values() {
        let s = schedule(8, 2, 16);
        let g = compute_gamma(&s, 2).unwrap();
        assert!((g - 0.6540).abs() < 1e-4);
        let s = schedule(1, 1, 4);
        let g = compute_gamma(&s, 2).unwrap();
        assert!((g - 0.5826).abs() < 1e-4);
    }

    #[test]
    fn gamma_is_half_at_zero_exponent() {
        // E^t = cumulative_prev + 1 -> sigmoid(0)
        assert_eq!(gamma_from_counts(3, 2, 5), 0.5);
    }

    #[test]
    fn gamma_rejects_step_one() {
        let s = schedule(2, 1, 4);
        assert!(compute_gamma(&s, 1).is_err());
    }

    fn tiny_model(seed: u64, tags: &[&str]) -> ModelCheckpoint {
        let config = TaggerConfig {
            vocab_size: 7,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 8,
            max_len: 6,
            seed,
            attention_mode: Default::default(),
        };
        ModelCheckpoint::new(config, tags.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn fill(model: &mut ModelCheckpoint, value: f64) {
        for t in model.named_weights.values_mut() {
            t.data.iter_mut().for_each(|v| *v = value);
        }
    }

    #[test]
    fn vanilla_boundaries_are_bit_exact() {
        let old = tiny_model(1, &["O", "B-A", "I-A"]);
        let new = tiny_model(2, &["O", "B-A", "I-A"]);
        let at0 = fuse_vanilla(&old, &new, 0.0).unwrap();
        for (name, t) in &at0.named_weights {
            assert_eq!(t.data, new.named_weights[name].data, "{name}");
        }
        let at1 = fuse_vanilla(&old, &new, 1.0).unwrap();
        for (name, t) in &at1.named_weights {
            assert_eq!(t.data, old.named_weights[name].data, "{name}");
        }
    }

    #[test]
    fn vanilla_midpoint_averages() {
        let mut old = tiny_model(1, &["O"]);
        let mut new = tiny_model(2, &["O"]);
        fill(&mut old, 2.0);
        fill(&mut new, 6.0);
        let fused = fuse_vanilla(&old, &new, 0.5).unwrap();
        for t in fused.named_weights.values() {
            assert!(t.data.iter().all(|&v| v == 4.0));
        }
    }

    #[test]
    fn vanilla_copies_new_classifier_rows() {
        let old = tiny_model(1, &["O", "B-A", "I-A"]);
        let new = old
            .expand_head(&["B-B".to_string(), "I-B".to_string()])
            .unwrap();
        let fused = fuse_vanilla(&old, &new, 1.0).unwrap();
        let w = &fused.named_weights["classifier.weight"];
        let new_w = &new.named_weights["classifier.weight"];
        let old_w = &old.named_weights["classifier.weight"];
        assert_eq!(&w.data[..old_w.numel()], &old_w.data[..]);
        assert_eq!(&w.data[old_w.numel()..], &new_w.data[old_w.numel()..]);
    }

    #[test]
    fn selection_worked_example() {
        let fisher = [0.1, 0.9, 0.5, 0.7];
        let sel = select_important(&fisher, 0.5).unwrap();
        assert_eq!(sel.k, 2);
        assert_eq!(sel.threshold, 0.7);
        assert_eq!(sel.mask, vec![false, true, false, true]);

        let old = [1.0, 2.0, 3.0, 4.0];
        let new = [5.0, 6.0, 7.0, 8.0];
        let fused: Vec<f64> = (0..4)
            .map(|i| {
                if sel.mask[i] {
                    0.5 * old[i] + 0.5 * new[i]
                } else {
                    new[i]
                }
            })
            .collect();
        assert_eq!(fused, vec![5.0, 4.0, 7.0, 6.0]);
    }

    #[test]
    fn equal_fisher_values_saturate_selection() {
        let fisher = [0.3; 6];
        let sel = select_important(&fisher, 0.5).unwrap();
        assert_eq!(sel.selected_count, 6);
    }

    #[test]
    fn selection_is_monotone_in_gamma() {
        let fisher = [0.9, 0.1, 0.8, 0.3, 0.5, 0.2, 0.7, 0.4];
        let small = select_important(&fisher, 0.3).unwrap();
        let large = select_important(&fisher, 0.7).unwrap();
        for (s, l) in small.mask.iter().zip(&large.mask) {
            assert!(!s || *l, "selection must grow with gamma");
        }
    }

    #[test]
    fn k_zero_degrades_to_pure_new() {
        let fisher = [1.0, 2.0];
        let sel = select_important(&fisher, 0.1).unwrap();
        assert_eq!(sel.selected_count, 0);
        assert!(sel.mask.iter().all(|&m| !m));
    }

    #[test]
    fn selective_with_all_selected_equals_vanilla() {
        let old = tiny_model(3, &["O", "B-A", "I-A"]);
        let new = tiny_model(4, &["O", "B-A", "I-A"]);
        // constant fisher selects everything under the >= rule
        let entries = old
            .named_weights
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: vec![1.0; t.numel()],
                        requires_grad: false,
                        grad: None,
                    },
                )
            })
            .collect();
        let fisher = FisherMap { entries };
        let (selective, plan) = fuse_selective(&old, &new, &fisher, 0.3, 0.5).unwrap();
        let vanilla = fuse_vanilla(&old, &new, 0.3).unwrap();
        assert_eq!(plan.selected_count, plan.total_count);
        for (name, t) in &selective.named_weights {
            assert_eq!(t.data, vanilla.named_weights[name].data, "{name}");
        }
    }

    #[test]
    fn fused_values_lie_between_old_and_new() {
        let old = tiny_model(5, &["O", "B-A", "I-A"]);
        let new = tiny_model(6, &["O", "B-A", "I-A"]);
        let fused = fuse_vanilla(&old, &new, 0.42).unwrap();
        for (name, t) in &fused.named_weights {
            let o = &old.named_weights[name];
            let n = &new.named_weights[name];
            for ((f, a), b) in t.data.iter().zip(&o.data).zip(&n.data) {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                assert!(*lo <= *f && f <= hi);
            }
        }
    }

    #[test]
    fn fisher_of_single_token_is_squared_gradient() {
        use crate::tensor::Tape;
        let model = tiny_model(9, &["O", "B-A", "I-A"]);
        let sentence = EncodedSentence {
            token_ids: vec![2],
            tags: vec!["B-A".to_string()],
        };
        let fisher = estimate_fisher(&model, &[sentence.clone()], 16, 0).unwrap();

        // independent recomputation of the single gradient
        let mut tape = Tape::new();
        let params = model.register_on_tape(&mut tape);
        let handles = model
            .forward_on_tape(&mut tape, &params, &sentence.token_ids)
            .unwrap();
        let row = tape.row(handles.log_probs, 0).unwrap();
        let ce = tape.cross_entropy_row(row, &[0.0, 1.0, 0.0]).unwrap();
        tape.backward(ce).unwrap();
        for (name, id) in params.ids.iter() {
            let grad = tape.grad(*id).unwrap();
            let f = &fisher.entries[name];
            for (a, g) in f.data.iter().zip(grad) {
                assert!((a - g * g).abs() < 1e-15, "{name}");
            }
        }
    }

    #[test]
    fn fisher_is_mean_over_tokens() {
        let model = tiny_model(9, &["O", "B-A", "I-A"]);
        let s1 = EncodedSentence {
            token_ids: vec![2],
            tags: vec!["B-A".to_string()],
        };
        let s2 = EncodedSentence {
            token_ids: vec![5],
            tags: vec!["O".to_string()],
        };
        let f1 = estimate_fisher(&model, &[s1.clone()], 16, 0).unwrap();
        let f2 = estimate_fisher(&model, &[s2.clone()], 16, 0).unwrap();
        let both = estimate_fisher(&model, &[s1, s2], 16, 0).unwrap();
        for (name, t) in &both.entries {
            let a = &f1.entries[name];
            let b = &f2.entries[name];
            for ((x, p), q) in t.data.iter().zip(&a.data).zip(&b.data) {
                assert!((x - (p + q) / 2.0).abs() < 1e-12, "{name}");
            }
        }
    }

    #[test]
    fn unused_embedding_rows_have_zero_fisher() {
        let model = tiny_model(9, &["O", "B-A", "I-A"]);
        let sentence = EncodedSentence {
            token_ids: vec![2],
            tags: vec!["O".to_string()],
        };
        let fisher = estimate_fisher(&model, &[sentence], 16, 0).unwrap();
        let emb = &fisher.entries["embed.token"];
        let d = 4;
        // row 3 never used -> zero importance
        assert!(emb.data[3 * d..4 * d].iter().all(|&v| v == 0.0));
        // row 2 used -> some nonzero entry
        assert!(emb.data[2 * d..3 * d].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn empty_fisher_data_is_a_contract_error() {
        let model = tiny_model(9, &["O"]);
        assert!(estimate_fisher(&model, &[], 16, 0).is_err());
    }
}
