//! Two-column CoNLL corpus format: `token<TAB or space>tag`, blank line
//! between sentences.

use std::io::BufRead;

use crate::data::{repair_bio, TaggedSentence};
use crate::error::{Error, Result};

/// Parse result plus a count of repaired dangling I- tags.
#[derive(Debug, Clone)]
pub struct ParsedCorpus {
    pub sentences: Vec<TaggedSentence>,
    pub repaired_tags: usize,
}

pub fn parse_conll(reader: impl BufRead) -> Result<ParsedCorpus> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut repaired = 0;

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>| {
        if !tokens.is_empty() {
            repaired += repair_bio(tags);
            sentences.push(TaggedSentence {
                tokens: std::mem::take(tokens),
                tags: std::mem::take(tags),
            });
        }
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut tokens, &mut tags);
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let (token, tag) = match (fields.next(), fields.next(), fields.next()) {
            (Some(token), Some(tag), None) => (token, tag),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected `token tag`, got {:?}", trimmed),
                })
            }
        };
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags);

    if sentences.is_empty() {
        return Err(Error::Input("corpus contains no sentences".into()));
    }
    if repaired > 0 {
        log::warn!("repaired {} dangling I- tags to B-", repaired);
    }
    Ok(ParsedCorpus {
        sentences,
        repaired_tags: repaired,
    })
}

pub fn parse_conll_str(text: &str) -> Result<ParsedCorpus> {
    parse_conll(text.as_bytes())
}

/// Inverse of [`parse_conll`]: one `token tag` line per token, blank line
/// after each sentence. Byte-stable for identical inputs.
pub fn serialize_conll(sentences: &[TaggedSentence]) -> String {
    let mut out = String::new();
    for sentence in sentences {
        for (token, tag) in sentence.tokens.iter().zip(&sentence.tags) {
            out.push_str(token);
            out.push(' ');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_smallest_corpus() {
        let parsed = parse_conll_str("EU B-ORG\nrejects O\n").unwrap();
        assert_eq!(parsed.sentences.len(), 1);
        assert_eq!(parsed.sentences[0].tokens, vec!["EU", "rejects"]);
        assert_eq!(parsed.sentences[0].tags, vec!["B-ORG", "O"]);
        assert_eq!(parsed.repaired_tags, 0);
    }

    #[test]
    fn blank_lines_split_sentences() {
        let parsed = parse_conll_str("a O\n\nb O\nc O\n\n\n").unwrap();
        assert_eq!(parsed.sentences.len(), 2);
        assert_eq!(parsed.sentences[1].tokens, vec!["b", "c"]);
    }

    #[test]
    fn accepts_tabs() {
        let parsed = parse_conll_str("EU\tB-ORG\n").unwrap();
        assert_eq!(parsed.sentences[0].tags, vec!["B-ORG"]);
    }

    #[test]
    fn repairs_dangling_inside_tag() {
        let parsed = parse_conll_str("Smith I-PER\nspoke O\n").unwrap();
        assert_eq!(parsed.sentences[0].tags, vec!["B-PER", "O"]);
        assert_eq!(parsed.repaired_tags, 1);
    }

    #[test]
    fn empty_file_is_an_input_error() {
        assert!(matches!(parse_conll_str(""), Err(Error::Input(_))));
        assert!(matches!(parse_conll_str("\n\n"), Err(Error::Input(_))));
    }

    #[test]
    fn ragged_line_reports_line_number() {
        let err = parse_conll_str("a O\nbroken\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let text = "EU B-ORG\nrejects O\n\nGerman B-MISC\ncall O\n\n";
        let parsed = parse_conll_str(text).unwrap();
        assert_eq!(serialize_conll(&parsed.sentences), text);
        let reparsed = parse_conll_str(&serialize_conll(&parsed.sentences)).unwrap();
        assert_eq!(reparsed.sentences, parsed.sentences);
    }
}
