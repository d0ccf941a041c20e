//! Confidence-based pseudo-labeling for non-entity tokens.
//!
//! Before training a step, the frozen previous model runs over the step's
//! data. O-labeled tokens are grouped by the old model's argmax tag; each
//! group's median prediction entropy becomes its confidence threshold. An O
//! token keeps the old model's label only when its entropy is strictly below
//! the threshold of that label's group; otherwise its target row is zeroed
//! and the token drops out of the cross-entropy loss.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::data::{tag_entity_type, EncodedSentence, EntityTypeSchedule, OUTSIDE};
use crate::error::{Error, Result};
use crate::model::{ModelCheckpoint, PredictionDistribution};

/// Anything that yields per-token tag distributions; lets tests script
/// old-model behavior exactly.
pub trait TokenPredictor {
    fn tag_space(&self) -> &[String];
    fn predict(&self, token_ids: &[usize]) -> Result<PredictionDistribution>;
}

impl TokenPredictor for ModelCheckpoint {
    fn tag_space(&self) -> &[String] {
        &self.tag_space
    }

    fn predict(&self, token_ids: &[usize]) -> Result<PredictionDistribution> {
        Ok(self.forward(token_ids)?.0)
    }
}

/// Shannon entropy of a probability row, natural log, `0 ln 0 := 0`.
pub fn token_entropy(row: &[f64]) -> f64 {
    let mut u = 0.0;
    for &p in row {
        if p > 0.0 {
            u -= p * p.ln();
        }
    }
    u
}

/// Per-tag median-entropy thresholds with group populations.
#[derive(Debug, Clone)]
pub struct ConfidenceStats {
    pub thresholds: BTreeMap<String, f64>,
    pub group_sizes: BTreeMap<String, usize>,
}

impl ConfidenceStats {
    pub fn threshold(&self, tag: &str) -> f64 {
        self.thresholds.get(tag).copied().unwrap_or(0.0)
    }
}

pub(crate) fn median_of(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Groups O-labeled tokens by the old model's argmax tag and takes each
/// group's median entropy as its threshold. Tags whose group is empty get a
/// threshold of 0, so nothing of theirs is ever retained.
pub fn compute_thresholds(
    old_model: &dyn TokenPredictor,
    data: &[EncodedSentence],
) -> Result<ConfidenceStats> {
    let mut groups: BTreeMap<String, Vec<f64>> = old_model
        .tag_space()
        .iter()
        .map(|tag| (tag.clone(), Vec::new()))
        .collect();
    for sentence in data {
        let dist = old_model.predict(&sentence.token_ids)?;
        for (i, tag) in sentence.tags.iter().enumerate() {
            if tag != OUTSIDE {
                continue;
            }
            let row = dist.prob_row(i);
            let argmax = dist.argmax_tag(i);
            let predicted = &old_model.tag_space()[argmax];
            groups
                .get_mut(predicted)
                .expect("argmax tag is in the old tag space")
                .push(token_entropy(row));
        }
    }
    let mut thresholds = BTreeMap::new();
    let mut group_sizes = BTreeMap::new();
    for (tag, mut entropies) in groups {
        group_sizes.insert(tag.clone(), entropies.len());
        let tau = if entropies.is_empty() {
            0.0
        } else {
            median_of(&mut entropies)
        };
        thresholds.insert(tag, tau);
    }
    Ok(ConfidenceStats {
        thresholds,
        group_sizes,
    })
}

/// Whether O tokens take the old model's label unconditionally or only under
/// the entropy threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoPolicy {
    Confidence,
    Naive,
}

/// One-hot (or all-zero) target rows for a sentence, over the step-t tag
/// space.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTarget {
    pub rows: Vec<f64>,
    pub width: usize,
    pub masked_count: usize,
}

impl PseudoTarget {
    pub fn num_tokens(&self) -> usize {
        self.rows.len() / self.width
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }

    /// Index of the 1 in row `i`, if the row is not masked.
    pub fn target_index(&self, i: usize) -> Option<usize> {
        self.row(i).iter().position(|&v| v == 1.0)
    }
}

/// What happened to each token while building its target row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoDecision {
    /// Ground-truth entity label kept as-is.
    Gold,
    /// O token relabeled with the old model's argmax (tag index given).
    Retained(usize),
    /// O token whose pseudo-label failed the confidence test; row zeroed.
    Rejected(usize),
}

/// Plain one-hot targets from the (masked) gold tags; used when
/// pseudo-labeling is disabled.
pub fn ground_truth_targets(tags: &[String], tag_space: &[String]) -> Result<PseudoTarget> {
    let width = tag_space.len();
    let mut rows = vec![0.0; tags.len() * width];
    for (i, tag) in tags.iter().enumerate() {
        let idx = tag_space
            .iter()
            .position(|t| t == tag)
            .ok_or_else(|| Error::Schedule(format!("tag {tag} not in the step tag space")))?;
        rows[i * width + idx] = 1.0;
    }
    Ok(PseudoTarget {
        rows,
        width,
        masked_count: 0,
    })
}

pub fn build_targets(
    old_model: &dyn TokenPredictor,
    sentence: &EncodedSentence,
    tag_space: &[String],
    stats: &ConfidenceStats,
    policy: PseudoPolicy,
) -> Result<PseudoTarget> {
    Ok(build_targets_audited(old_model, sentence, tag_space, stats, policy)?.0)
}

/// [`build_targets`] plus the per-token decisions, for the audit file.
pub fn build_targets_audited(
    old_model: &dyn TokenPredictor,
    sentence: &EncodedSentence,
    tag_space: &[String],
    stats: &ConfidenceStats,
    policy: PseudoPolicy,
) -> Result<(PseudoTarget, Vec<PseudoDecision>)> {
    let old_tags = old_model.tag_space();
    if old_tags.len() > tag_space.len() || tag_space[..old_tags.len()] != *old_tags {
        return Err(Error::Schedule(format!(
            "old tag space {:?} is not a prefix of the step tag space {:?}",
            old_tags, tag_space
        )));
    }
    let width = tag_space.len();
    let mut rows = vec![0.0; sentence.len() * width];
    let mut decisions = Vec::with_capacity(sentence.len());
    let mut masked_count = 0;
    let dist = old_model.predict(&sentence.token_ids)?;

    for (i, tag) in sentence.tags.iter().enumerate() {
        if tag != OUTSIDE {
            let idx = tag_space
                .iter()
                .position(|t| t == tag)
                .ok_or_else(|| Error::Schedule(format!("tag {tag} not in the step tag space")))?;
            rows[i * width + idx] = 1.0;
            decisions.push(PseudoDecision::Gold);
            continue;
        }
        // O-labeled: consult the old model over {O} + old tags
        let argmax = dist.argmax_tag(i);
        let keep = match policy {
            PseudoPolicy::Naive => true,
            PseudoPolicy::Confidence => {
                let u = token_entropy(dist.prob_row(i));
                u < stats.threshold(&old_tags[argmax])
            }
        };
        if keep {
            rows[i * width + argmax] = 1.0;
            decisions.push(PseudoDecision::Retained(argmax));
        } else {
            masked_count += 1;
            decisions.push(PseudoDecision::Rejected(argmax));
        }
    }

    Ok((
        PseudoTarget {
            rows,
            width,
            masked_count,
        },
        decisions,
    ))
}

/// Adaptive per-token loss weights.
#[derive(Debug, Clone)]
pub struct TokenWeighting {
    /// One weight vector per sentence, aligned with the input targets.
    pub eta: Vec<Vec<f64>>,
    pub n_old: usize,
    pub n_new: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Computes `eta` for a batch of targets: tokens whose target is an old
/// entity tag get `0.5 + sigmoid(N_old / N_new)`, everything else 1.0.
/// `N_new = 0` with old-tag tokens present uses the limit value 1.5.
pub fn token_weights(
    targets: &[PseudoTarget],
    tag_space: &[String],
    schedule: &EntityTypeSchedule,
    t: usize,
) -> TokenWeighting {
    let old_types = schedule.old_types(t);
    let new_types = schedule.types_at(t);
    let is_old_tag = |idx: usize| {
        tag_entity_type(&tag_space[idx])
            .map(|ty| old_types.iter().any(|o| o == ty))
            .unwrap_or(false)
    };
    let is_new_tag = |idx: usize| {
        tag_entity_type(&tag_space[idx])
            .map(|ty| new_types.iter().any(|n| n == ty))
            .unwrap_or(false)
    };

    let mut n_old = 0;
    let mut n_new = 0;
    for target in targets {
        for i in 0..target.num_tokens() {
            match target.target_index(i) {
                Some(idx) if is_old_tag(idx) => n_old += 1,
                Some(idx) if is_new_tag(idx) => n_new += 1,
                _ => {}
            }
        }
    }
    let old_eta = if n_old == 0 {
        1.0
    } else if n_new == 0 {
        1.5
    } else {
        0.5 + sigmoid(n_old as f64 / n_new as f64)
    };

    let eta = targets
        .iter()
        .map(|target| {
            (0..target.num_tokens())
                .map(|i| match target.target_index(i) {
                    Some(idx) if is_old_tag(idx) => old_eta,
                    _ => 1.0,
                })
                .collect()
        })
        .collect();
    TokenWeighting { eta, n_old, n_new }
}

/// Token-averaged weighted cross entropy for one sentence: masked rows
/// contribute 0 but still count in the normalizer.
pub fn weighted_ce(
    predictions: &PredictionDistribution,
    targets: &PseudoTarget,
    eta: &[f64],
) -> Result<f64> {
    let n = predictions.num_tokens();
    let c = predictions.num_tags();
    if targets.width != c || targets.num_tokens() != n || eta.len() != n {
        return Err(Error::Dimension {
            op: "weighted_ce",
            lhs: vec![n, c],
            rhs: vec![targets.num_tokens(), targets.width],
        });
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for e in 0..c {
            row += targets.row(i)[e] * predictions.log_probs.data[i * c + e];
        }
        total += eta[i] * row;
    }
    Ok(-total / n as f64)
}

/// Step-level audit of threshold computation and target building.
#[derive(Debug, Clone, Serialize)]
pub struct PseudoAudit {
    pub thresholds: BTreeMap<String, f64>,
    pub group_sizes: BTreeMap<String, usize>,
    pub retained: BTreeMap<String, usize>,
    pub rejected: BTreeMap<String, usize>,
    pub masked_count: usize,
}

impl PseudoAudit {
    pub fn from_decisions(
        stats: &ConfidenceStats,
        old_tag_space: &[String],
        decisions: &[Vec<PseudoDecision>],
    ) -> Self {
        let mut retained: BTreeMap<String, usize> = BTreeMap::new();
        let mut rejected: BTreeMap<String, usize> = BTreeMap::new();
        let mut masked_count = 0;
        for sentence in decisions {
            for decision in sentence {
                match decision {
                    PseudoDecision::Gold => {}
                    PseudoDecision::Retained(idx) => {
                        *retained.entry(old_tag_space[*idx].clone()).or_default() += 1;
                    }
                    PseudoDecision::Rejected(idx) => {
                        *rejected.entry(old_tag_space[*idx].clone()).or_default() += 1;
                        masked_count += 1;
                    }
                }
            }
        }
        PseudoAudit {
            thresholds: stats.thresholds.clone(),
            group_sizes: stats.group_sizes.clone(),
            retained,
            rejected,
            masked_count,
        }
    }
}
