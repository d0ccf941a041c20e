//! Whitespace-token vocabulary with an UNK id.

use std::collections::BTreeMap;

use crate::data::TaggedSentence;

pub const UNK_TOKEN: &str = "<unk>";

/// Corpus-built token vocabulary. Id 0 is UNK; remaining ids follow sorted
/// token order, so the mapping is independent of sentence order.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a TaggedSentence>) -> Self {
        let mut uniq: Vec<String> = corpus
            .into_iter()
            .flat_map(|s| s.tokens.iter().cloned())
            .collect();
        uniq.sort();
        uniq.dedup();
        let mut tokens = vec![UNK_TOKEN.to_string()];
        tokens.extend(uniq);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn encode(&self, sentence: &TaggedSentence) -> EncodedSentence {
        EncodedSentence {
            token_ids: sentence.tokens.iter().map(|t| self.id(t)).collect(),
            tags: sentence.tags.clone(),
        }
    }

    pub fn encode_all(&self, sentences: &[TaggedSentence]) -> Vec<EncodedSentence> {
        sentences.iter().map(|s| self.encode(s)).collect()
    }

    /// One token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        out
    }
}

/// A sentence mapped through the vocabulary, keeping its (possibly masked)
/// tag strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub token_ids: Vec<usize>,
    pub tags: Vec<String>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}
