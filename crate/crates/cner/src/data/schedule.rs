//! Partition of entity types into continual-learning steps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An FG-a-PG-b entity-type schedule: `fg` types in the base step, `pg` per
/// subsequent step. Steps are 1-based everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTypeSchedule {
    pub ordered_types: Vec<String>,
    pub fg: usize,
    pub pg: usize,
    pub steps: Vec<Vec<String>>,
    pub permutation_seed: Option<u64>,
}

impl EntityTypeSchedule {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Types introduced at step `t` (1-based).
    pub fn types_at(&self, t: usize) -> &[String] {
        &self.steps[t - 1]
    }

    /// `E^t`: number of types introduced at step `t`.
    pub fn type_count_at(&self, t: usize) -> usize {
        self.steps[t - 1].len()
    }

    /// Sum of type counts over steps `1..=t`.
    pub fn cumulative_count(&self, t: usize) -> usize {
        self.steps[..t].iter().map(Vec::len).sum()
    }

    /// Union of types introduced in steps `1..=t`, in schedule order.
    pub fn types_up_to(&self, t: usize) -> Vec<String> {
        self.steps[..t].iter().flatten().cloned().collect()
    }

    /// Types from steps before `t` (the "old" partition at step `t`).
    pub fn old_types(&self, t: usize) -> Vec<String> {
        self.types_up_to(t.saturating_sub(1))
    }

    /// BIO tags for the types introduced at step `t`: B- then I- per type,
    /// in schedule order.
    pub fn tags_at(&self, t: usize) -> Vec<String> {
        self.types_at(t)
            .iter()
            .flat_map(|ty| [format!("B-{ty}"), format!("I-{ty}")])
            .collect()
    }
}

/// Builds the schedule: alphabetical type order by default, or a seeded
/// permutation, partitioned as `[fg, pg, pg, ...]` (last step may be short).
pub fn build_schedule(
    types: &[String],
    fg: usize,
    pg: usize,
    permutation_seed: Option<u64>,
) -> Result<EntityTypeSchedule> {
    if fg < 1 || pg < 1 {
        return Err(Error::Schedule(format!(
            "fg and pg must be at least 1, got fg={fg} pg={pg}"
        )));
    }
    if fg > types.len() {
        return Err(Error::Schedule(format!(
            "fg={} exceeds the {} available entity types",
            fg,
            types.len()
        )));
    }
    let mut ordered: Vec<String> = types.to_vec();
    ordered.sort();
    ordered.dedup();
    if ordered.len() != types.len() {
        return Err(Error::Schedule("duplicate entity types".into()));
    }
    if let Some(seed) = permutation_seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ordered.shuffle(&mut rng);
    }

    let mut steps = vec![ordered[..fg].to_vec()];
    for chunk in ordered[fg..].chunks(pg) {
        steps.push(chunk.to_vec());
    }
    Ok(EntityTypeSchedule {
        ordered_types: ordered,
        fg,
        pg,
        steps,
        permutation_seed,
    })
}
