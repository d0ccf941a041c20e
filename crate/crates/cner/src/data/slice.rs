//! Deterministic stand-in for greedy train-set slicing.
//!
//! Each sentence goes to the step whose type set has the most entity
//! mentions in it; ties break toward the step currently holding fewer
//! sentences, then toward the earlier step. Sentences without scheduled
//! entities are spread round-robin. Every slice is then masked to its own
//! step's types.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{mask_labels, EntityTypeSchedule, TaggedSentence};
use crate::error::{Error, Result};

/// Per-step training slices plus shared dev/test pools.
///
/// Train slices are stored masked to their own step's types. The dev/test
/// pools are stored unmasked; [`SlicedDataset::dev_view`] masks dev to the
/// current step's types and [`SlicedDataset::test_view`] masks test to all
/// types seen so far.
#[derive(Debug, Clone, Default)]
pub struct SlicedDataset {
    pub train_slices: Vec<Vec<TaggedSentence>>,
    pub dev_pool: Vec<TaggedSentence>,
    pub test_pool: Vec<TaggedSentence>,
}

impl SlicedDataset {
    pub fn with_pools(mut self, dev: Vec<TaggedSentence>, test: Vec<TaggedSentence>) -> Self {
        self.dev_pool = dev;
        self.test_pool = test;
        self
    }

    /// Dev sentences masked to the types introduced at step `t`.
    pub fn dev_view(&self, schedule: &EntityTypeSchedule, t: usize) -> Vec<TaggedSentence> {
        let visible = schedule.types_at(t).to_vec();
        self.dev_pool
            .iter()
            .map(|s| mask_labels(s, &visible))
            .collect()
    }

    /// Test sentences masked to every type learned up to step `t`.
    pub fn test_view(&self, schedule: &EntityTypeSchedule, t: usize) -> Vec<TaggedSentence> {
        let visible = schedule.types_up_to(t);
        self.test_pool
            .iter()
            .map(|s| mask_labels(s, &visible))
            .collect()
    }
}

pub fn greedy_slice(
    corpus: &[TaggedSentence],
    schedule: &EntityTypeSchedule,
    seed: u64,
) -> Result<SlicedDataset> {
    if corpus.is_empty() {
        return Err(Error::Slice("corpus is empty".into()));
    }
    for ty in &schedule.ordered_types {
        let occurs = corpus
            .iter()
            .any(|s| s.mention_count(std::slice::from_ref(ty)) > 0);
        if !occurs {
            return Err(Error::Slice(format!(
                "scheduled type {ty} never occurs in the corpus"
            )));
        }
    }

    let steps = schedule.num_steps();
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut slices: Vec<Vec<TaggedSentence>> = vec![Vec::new(); steps];
    let mut round_robin = 0usize;
    for idx in order {
        let sentence = &corpus[idx];
        let counts: Vec<usize> = (1..=steps)
            .map(|t| sentence.mention_count(schedule.types_at(t)))
            .collect();
        let best = *counts.iter().max().unwrap();
        let target = if best == 0 {
            let t = round_robin % steps;
            round_robin += 1;
            t
        } else {
            // among max-count steps: fewest sentences, then earliest
            (0..steps)
                .filter(|&t| counts[t] == best)
                .min_by_key(|&t| (slices[t].len(), t))
                .unwrap()
        };
        slices[target].push(sentence.clone());
    }

    for (t, slice) in slices.iter().enumerate() {
        if slice.is_empty() {
            return Err(Error::Slice(format!(
                "step {} received zero sentences",
                t + 1
            )));
        }
    }

    let train_slices = slices
        .into_iter()
        .enumerate()
        .map(|(t, slice)| {
            let visible = schedule.types_at(t + 1).to_vec();
            slice.iter().map(|s| mask_labels(s, &visible)).collect()
        })
        .collect();

    Ok(SlicedDataset {
        train_slices,
        dev_pool: Vec::new(),
        test_pool: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_schedule;

    fn sent(tags: &[&str]) -> TaggedSentence {
        TaggedSentence {
            tokens: (0..tags.len()).map(|i| format!("w{i}")).collect(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
        }
    }

    fn one_type_corpus() -> Vec<TaggedSentence> {
        vec![
            sent(&["B-ORG", "O"]),
            sent(&["B-PER", "O"]),
            sent(&["O", "B-ORG"]),
            sent(&["O", "B-PER"]),
        ]
    }

    #[test]
    fn single_type_sentences_group_by_type() {
        let schedule = build_schedule(
            &["ORG".to_string(), "PER".to_string()],
            1,
            1,
            None,
        )
        .unwrap();
        let sliced = greedy_slice(&one_type_corpus(), &schedule, 0).unwrap();
        assert_eq!(sliced.train_slices[0].len(), 2);
        assert_eq!(sliced.train_slices[1].len(), 2);
        for s in &sliced.train_slices[0] {
            assert!(s.tags.iter().all(|t| t == "O" || t.ends_with("ORG")));
        }
    }

    #[test]
    fn majority_type_wins() {
        let schedule = build_schedule(
            &["ORG".to_string(), "PER".to_string()],
            1,
            1,
            None,
        )
        .unwrap();
        let corpus = vec![
            sent(&["B-ORG", "B-ORG", "B-PER"]),
            sent(&["B-PER", "O"]),
            sent(&["B-ORG", "O"]),
        ];
        let sliced = greedy_slice(&corpus, &schedule, 0).unwrap();
        // the 2-ORG/1-PER sentence must land in the ORG slice
        assert!(sliced.train_slices[0]
            .iter()
            .any(|s| s.tokens.len() == 3));
    }

    #[test]
    fn slices_partition_the_corpus() {
        let schedule = build_schedule(
            &["ORG".to_string(), "PER".to_string()],
            1,
            1,
            None,
        )
        .unwrap();
        let corpus = one_type_corpus();
        let sliced = greedy_slice(&corpus, &schedule, 3).unwrap();
        let total: usize = sliced.train_slices.iter().map(Vec::len).sum();
        assert_eq!(total, corpus.len());
    }

    #[test]
    fn same_seed_gives_identical_slices() {
        let schedule = build_schedule(
            &["ORG".to_string(), "PER".to_string()],
            1,
            1,
            None,
        )
        .unwrap();
        let corpus = one_type_corpus();
        let a = greedy_slice(&corpus, &schedule, 11).unwrap();
        let b = greedy_slice(&corpus, &schedule, 11).unwrap();
        assert_eq!(a.train_slices, b.train_slices);
    }

    #[test]
    fn missing_type_is_a_slicing_error() {
        let schedule = build_schedule(
            &["ORG".to_string(), "PER".to_string()],
            1,
            1,
            None,
        )
        .unwrap();
        let corpus = vec![sent(&["B-ORG", "O"])];
        let err = greedy_slice(&corpus, &schedule, 0).unwrap_err();
        assert!(err.to_string().contains("PER"));
    }
}
