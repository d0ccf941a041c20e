//! Seeded synthetic corpus generator.
//!
//! A spec lists per-type gazetteers, whitespace-tokenized templates whose
//! entity slots are `{TYPE}` placeholder tokens, and requested per-type
//! mention counts. Generation fills templates until every type meets its
//! count; multi-token entities emit B-/I- runs.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::data::{TaggedSentence, OUTSIDE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Deserialize)]
pub struct SynthSpec {
    pub templates: Vec<String>,
    pub gazetteer: BTreeMap<String, Vec<String>>,
    pub counts: BTreeMap<String, usize>,
}

/// Generated sentences plus realized per-type mention counts.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub sentences: Vec<TaggedSentence>,
    pub mention_counts: BTreeMap<String, usize>,
}

impl SynthSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::Spec(format!("bad synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Bundled four-type spec used by the desk-scale experiments. Types are
    /// LOC, MISC, ORG, PER; templates mix types within sentences so that
    /// masked slices exhibit a real semantic shift of the non-entity class.
    pub fn builtin(mentions_per_type: usize) -> Self {
        let gazetteer: BTreeMap<String, Vec<String>> = [
            (
                "LOC",
                vec![
                    "paris", "london", "berlin", "tokyo", "oslo", "madrid", "cairo", "sydney",
                    "new york", "los angeles",
                ],
            ),
            (
                "MISC",
                vec![
                    "olympics",
                    "easter",
                    "eurovision",
                    "oscars",
                    "carnival",
                    "worldcup",
                    "marathon",
                    "biennale",
                ],
            ),
            (
                "ORG",
                vec![
                    "acme", "globex", "initech", "umbrella", "cyberdyne", "tyrell", "hooli",
                    "vandelay", "wonka industries",
                ],
            ),
            (
                "PER",
                vec![
                    "alice", "bob", "carol", "david", "erika", "frank", "grace", "henry",
                    "mary ann",
                ],
            ),
        ]
        .into_iter()
        .map(|(ty, names)| {
            (
                ty.to_string(),
                names.into_iter().map(str::to_string).collect(),
            )
        })
        .collect();

        let templates = [
            "{PER} spoke to reporters yesterday",
            "{PER} met {PER} in {LOC}",
            "{ORG} hired {PER} last week",
            "{ORG} opened offices in {LOC}",
            "{LOC} welcomes many visitors",
            "the {MISC} took place in {LOC}",
            "{PER} wrote about the {MISC}",
            "{ORG} sponsored the {MISC} again",
            "analysts praised {ORG} today",
            "{PER} travelled to {LOC} recently",
            "crowds enjoyed the {MISC} broadcast",
            "{LOC} is far from {LOC}",
            "{ORG} and {ORG} announced a merger",
            "{PER} now works for {ORG}",
        ]
        .into_iter()
        .map(str::to_string)
        .collect();

        let counts = ["LOC", "MISC", "ORG", "PER"]
            .into_iter()
            .map(|ty| (ty.to_string(), mentions_per_type))
            .collect();

        SynthSpec {
            templates,
            gazetteer,
            counts,
        }
    }

    fn validate(&self) -> Result<()> {
        for ty in self.counts.keys() {
            if !self
                .templates
                .iter()
                .any(|t| t.split_whitespace().any(|tok| tok == placeholder(ty)))
            {
                return Err(Error::Spec(format!("no template mentions type {ty}")));
            }
        }
        for template in &self.templates {
            for token in template.split_whitespace() {
                if let Some(ty) = placeholder_type(token) {
                    match self.gazetteer.get(ty) {
                        Some(entries) if !entries.is_empty() => {}
                        _ => {
                            return Err(Error::Spec(format!(
                                "empty or missing gazetteer for type {ty}"
                            )))
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn placeholder(ty: &str) -> String {
    format!("{{{ty}}}")
}

fn placeholder_type(token: &str) -> Option<&str> {
    token.strip_prefix('{')?.strip_suffix('}')
}

pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mention_counts: BTreeMap<String, usize> =
        spec.counts.keys().map(|ty| (ty.clone(), 0)).collect();
    let mut sentences = Vec::new();

    loop {
        // alphabetically-first type still short of its requested count
        let Some(needy) = spec
            .counts
            .iter()
            .find(|(ty, want)| mention_counts[*ty] < **want)
            .map(|(ty, _)| ty.clone())
        else {
            break;
        };
        let candidates: Vec<&String> = spec
            .templates
            .iter()
            .filter(|t| {
                t.split_whitespace()
                    .any(|tok| tok == placeholder(&needy))
            })
            .collect();
        let template = candidates.choose(&mut rng).unwrap();

        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        for token in template.split_whitespace() {
            match placeholder_type(token) {
                Some(ty) => {
                    let entry = spec.gazetteer[ty].choose(&mut rng).unwrap();
                    for (i, part) in entry.split_whitespace().enumerate() {
                        tokens.push(part.to_string());
                        tags.push(if i == 0 {
                            format!("B-{ty}")
                        } else {
                            format!("I-{ty}")
                        });
                    }
                    *mention_counts.entry(ty.to_string()).or_insert(0) += 1;
                }
                None => {
                    tokens.push(token.to_string());
                    tags.push(OUTSIDE.to_string());
                }
            }
        }
        sentences.push(TaggedSentence { tokens, tags });
    }

    Ok(SynthCorpus {
        sentences,
        mention_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            templates: vec!["{PER} works".to_string()],
            gazetteer: [("PER".to_string(), vec!["alice".to_string()])]
                .into_iter()
                .collect(),
            counts: [("PER".to_string(), 1)].into_iter().collect(),
        }
    }

    #[test]
    fn single_template_single_entity() {
        let corpus = synth_corpus(&tiny_spec(), 0).unwrap();
        assert_eq!(corpus.sentences.len(), 1);
        assert_eq!(corpus.sentences[0].tokens, vec!["alice", "works"]);
        assert_eq!(corpus.sentences[0].tags, vec!["B-PER", "O"]);
    }

    #[test]
    fn multi_token_entity_emits_bio_run() {
        let mut spec = tiny_spec();
        spec.gazetteer
            .insert("PER".to_string(), vec!["mary ann".to_string()]);
        let corpus = synth_corpus(&spec, 0).unwrap();
        assert_eq!(corpus.sentences[0].tags, vec!["B-PER", "I-PER", "O"]);
    }

    #[test]
    fn counts_are_met_or_exceeded() {
        let spec = SynthSpec::builtin(50);
        let corpus = synth_corpus(&spec, 42).unwrap();
        for (ty, want) in &spec.counts {
            assert!(
                corpus.mention_counts[ty] >= *want,
                "{ty}: {} < {want}",
                corpus.mention_counts[ty]
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::builtin(20);
        let a = synth_corpus(&spec, 9).unwrap();
        let b = synth_corpus(&spec, 9).unwrap();
        assert_eq!(a.sentences, b.sentences);
    }

    #[test]
    fn empty_gazetteer_is_a_spec_error() {
        let mut spec = tiny_spec();
        spec.gazetteer.insert("PER".to_string(), vec![]);
        assert!(matches!(synth_corpus(&spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn type_without_template_is_a_spec_error() {
        let mut spec = tiny_spec();
        spec.counts.insert("LOC".to_string(), 5);
        assert!(matches!(synth_corpus(&spec, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
templates = ["{PER} works"]

[gazetteer]
PER = ["alice", "bob"]

[counts]
PER = 3
"#;
        let spec = SynthSpec::from_toml_str(text).unwrap();
        let corpus = synth_corpus(&spec, 1).unwrap();
        assert!(corpus.mention_counts["PER"] >= 3);
    }
}
