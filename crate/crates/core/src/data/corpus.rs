use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An annotated mention as stored in corpus files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub length: usize,
    #[serde(rename = "type")]
    pub label: String,
    /// Present on model predictions only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl Mention {
    pub fn new(start: usize, length: usize, label: impl Into<String>) -> Self {
        Mention {
            start,
            length,
            label: label.into(),
            confidence: None,
        }
    }

    /// Index of the last token, inclusive.
    pub fn end(&self) -> usize {
        self.start + self.length - 1
    }

    /// `true` if `self` covers `other` and the two spans differ.
    pub fn strictly_contains(&self, other: &Mention) -> bool {
        self.start <= other.start
            && other.end() <= self.end()
            && (self.start, self.length) != (other.start, other.length)
    }
}

/// A pre-tokenized sentence with optional POS tags; mentions may nest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    #[serde(rename = "pos", default, skip_serializing_if = "Option::is_none")]
    pub pos_tags: Option<Vec<String>>,
    pub entities: Vec<Mention>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks the structural invariants of a sentence.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.tokens.is_empty() {
            return Err("sentence has no tokens".into());
        }
        if let Some(pos) = &self.pos_tags {
            if pos.len() != self.tokens.len() {
                return Err(format!("{} POS tags for {} tokens", pos.len(), self.tokens.len()));
            }
        }
        let mut spans = HashSet::new();
        for m in &self.entities {
            if m.length == 0 {
                return Err(format!("entity at {} has zero length", m.start));
            }
            if m.start + m.length > self.tokens.len() {
                return Err(format!(
                    "entity ({}, {}, {}) exceeds {} tokens",
                    m.start,
                    m.length,
                    m.label,
                    self.tokens.len()
                ));
            }
            if !spans.insert((m.start, m.length)) {
                let kind = if self
                    .entities
                    .iter()
                    .filter(|o| (o.start, o.length) == (m.start, m.length))
                    .all(|o| o.label == m.label)
                {
                    "duplicate entity"
                } else {
                    "conflicting types for span"
                };
                return Err(format!("{kind} ({}, {}, {})", m.start, m.length, m.label));
            }
        }
        Ok(())
    }
}

/// Reads a JSON Lines corpus. Blank lines are skipped.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Sentence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file), path)
}

pub fn read_corpus(reader: impl BufRead, path: &Path) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let load_err = |message: String| Error::Load {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let sentence: Sentence = serde_json::from_str(&line).map_err(|e| load_err(e.to_string()))?;
        sentence.validate().map_err(load_err)?;
        out.push(sentence);
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, corpus: &[Sentence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in corpus {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fraction of mentions strictly contained in another mention of the same
/// sentence; 0 for a corpus without mentions.
pub fn nesting_ratio(corpus: &[Sentence]) -> f64 {
    let mut nested = 0usize;
    let mut total = 0usize;
    for s in corpus {
        for m in &s.entities {
            total += 1;
            if s.entities.iter().any(|o| o.strictly_contains(m)) {
                nested += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        nested as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use std::io::Cursor;

    use proptest::prelude::*;

    use super::*;

    fn parse(text: &str) -> Result<Vec<Sentence>> {
        read_corpus(Cursor::new(text), Path::new("mem.jsonl"))
    }

    #[test]
    fn parses_minimal_record() {
        let c = parse(r#"{"tokens":["a","b"],"entities":[{"start":0,"length":2,"type":"PER"}]}"#).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].entities, vec![Mention::new(0, 2, "PER")]);
        assert!(c[0].pos_tags.is_none());
    }

    #[test]
    fn out_of_range_entity_names_line() {
        let text = concat!(
            r#"{"tokens":["a"],"entities":[]}"#,
            "\n",
            r#"{"tokens":["a","b"],"entities":[{"start":1,"length":2,"type":"PER"}]}"#
        );
        match parse(text).unwrap_err() {
            Error::Load { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("exceeds"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_and_conflicting_entities_rejected() {
        let dup =
            r#"{"tokens":["a","b"],"entities":[{"start":0,"length":1,"type":"X"},{"start":0,"length":1,"type":"X"}]}"#;
        assert!(parse(dup).unwrap_err().to_string().contains("duplicate"));
        let conflict =
            r#"{"tokens":["a","b"],"entities":[{"start":0,"length":1,"type":"X"},{"start":0,"length":1,"type":"Y"}]}"#;
        assert!(parse(conflict).unwrap_err().to_string().contains("conflicting"));
    }

    #[test]
    fn malformed_lines_rejected() {
        assert!(parse(r#"{"tokens":[],"entities":[]}"#).is_err());
        assert!(parse(r#"{"tokens":["a"]}"#).is_err());
        assert!(parse(r#"{"tokens":["a"],"pos":["X","Y"],"entities":[]}"#).is_err());
        assert!(parse("not json").is_err());
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse("").unwrap().is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
    }

    #[test]
    fn nesting_ratio_counts_contained_mentions() {
        let s = Sentence {
            tokens: vec!["a".into(); 5],
            pos_tags: None,
            entities: vec![
                Mention::new(0, 4, "A"),
                Mention::new(1, 2, "B"),
                Mention::new(4, 1, "C"),
            ],
        };
        assert!((nesting_ratio(&[s]) - 1.0 / 3.0).abs() < 1e-15);
    }

    fn sentence_strategy() -> impl Strategy<Value = Sentence> {
        (1usize..8, any::<bool>())
            .prop_flat_map(|(n, with_pos)| {
                let tokens = prop::collection::vec("[a-z\u{e9}\u{4e2d}]{0,4}", n);
                let pos = prop::collection::vec("[A-Z]{1,3}", n);
                let spans = prop::collection::btree_set((0..n, 1..=n), 0..5);
                (tokens, pos, spans, Just(with_pos), Just(n))
            })
            .prop_map(|(tokens, pos, spans, with_pos, n)| Sentence {
                tokens,
                pos_tags: with_pos.then_some(pos),
                entities: spans
                    .into_iter()
                    .filter(|&(s, l)| s + l <= n)
                    .enumerate()
                    .map(|(i, (s, l))| Mention::new(s, l, format!("T{}", i % 3)))
                    .collect(),
            })
    }

    proptest! {
        #[test]
        fn write_then_load_round_trips(corpus in prop::collection::vec(sentence_strategy(), 0..6)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.jsonl");
            write_corpus(&path, &corpus).unwrap();
            prop_assert_eq!(load_corpus(&path).unwrap(), corpus);
        }
    }
}
