//! Corpus ingestion, BIO tag algebra, step schedules, and slicing.

mod conll;
mod schedule;
mod slice;
mod synth;
mod vocab;

pub use conll::{parse_conll, parse_conll_str, serialize_conll, ParsedCorpus};
pub use schedule::{build_schedule, EntityTypeSchedule};
pub use slice::{greedy_slice, SlicedDataset};
pub use synth::{synth_corpus, SynthCorpus, SynthSpec};
pub use vocab::{EncodedSentence, Vocab, UNK_TOKEN};

/// The non-entity tag.
pub const OUTSIDE: &str = "O";

/// One whitespace-tokenized sentence with BIO tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> crate::Result<Self> {
        if tokens.len() != tags.len() {
            return Err(crate::Error::Contract(format!(
                "sentence has {} tokens but {} tags",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(TaggedSentence { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Entity types mentioned in this sentence, by their B- tags.
    pub fn mention_count(&self, types: &[String]) -> usize {
        self.tags
            .iter()
            .filter(|tag| {
                tag_entity_type(tag)
                    .map(|t| tag.starts_with("B-") && types.iter().any(|x| x == t))
                    .unwrap_or(false)
            })
            .count()
    }
}

/// Extracts the entity type from a BIO tag ("B-PER" -> "PER"); `None` for "O".
pub fn tag_entity_type(tag: &str) -> Option<&str> {
    tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-"))
}

/// Replaces tags of entity types outside `visible_types` with "O".
pub fn mask_labels(sentence: &TaggedSentence, visible_types: &[String]) -> TaggedSentence {
    let tags = sentence
        .tags
        .iter()
        .map(|tag| match tag_entity_type(tag) {
            Some(t) if visible_types.iter().any(|v| v == t) => tag.clone(),
            Some(_) => OUTSIDE.to_string(),
            None => tag.clone(),
        })
        .collect();
    TaggedSentence {
        tokens: sentence.tokens.clone(),
        tags,
    }
}

/// Rewrites dangling I- tags (no preceding B-/I- of the same type) to B-.
/// Returns the number of repairs.
pub fn repair_bio(tags: &mut [String]) -> usize {
    let mut repairs = 0;
    for i in 0..tags.len() {
        let Some(t) = tags[i].strip_prefix("I-").map(str::to_string) else {
            continue;
        };
        let ok = i > 0
            && (tags[i - 1] == format!("B-{t}") || tags[i - 1] == format!("I-{t}"));
        if !ok {
            tags[i] = format!("B-{t}");
            repairs += 1;
        }
    }
    repairs
}

/// The distinct entity types present in a corpus, sorted alphabetically.
pub fn collect_types(corpus: &[TaggedSentence]) -> Vec<String> {
    let mut types: Vec<String> = corpus
        .iter()
        .flat_map(|s| s.tags.iter())
        .filter_map(|tag| tag_entity_type(tag).map(str::to_string))
        .collect();
    types.sort();
    types.dedup();
    types
}
