use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::Sentence;
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD: &str = "<pad>";
const UNK: &str = "<unk>";

pub const VOCAB_FORMAT_VERSION: u32 = 1;

/// Dense string ↔ id table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Lexicon {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Lexicon {
    fn with_reserved() -> Self {
        let mut lex = Lexicon::default();
        lex.add(PAD);
        lex.add(UNK);
        lex
    }

    fn add(&mut self, item: &str) -> usize {
        if let Some(&id) = self.index.get(item) {
            return id;
        }
        let id = self.items.len();
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    /// Id of `item`, or the unknown id.
    pub fn id_or_unk(&self, item: &str) -> usize {
        self.get(item).unwrap_or(UNK_ID)
    }

    pub fn item(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    fn to_map(&self) -> BTreeMap<String, usize> {
        self.items.iter().cloned().zip(0..).collect()
    }

    fn from_map(name: &str, map: BTreeMap<String, usize>) -> Result<Self> {
        let mut items = vec![None; map.len()];
        for (item, id) in map {
            match items.get_mut(id) {
                Some(slot @ None) => *slot = Some(item),
                _ => return Err(Error::Data(format!("{name} ids are not dense"))),
            }
        }
        let items: Vec<String> = items.into_iter().map(|i| i.expect("dense")).collect();
        let index = items.iter().cloned().zip(0..).collect();
        Ok(Lexicon { items, index })
    }
}

/// Word, character, POS and entity-type tables. Entity types have no
/// reserved entries; the null class is the extra index `num_types()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SavedVocab", into = "SavedVocab")]
pub struct Vocabulary {
    pub words: Lexicon,
    pub chars: Lexicon,
    pub pos: Lexicon,
    pub types: Lexicon,
}

impl Vocabulary {
    pub fn build(corpus: &[Sentence]) -> Self {
        let mut words = Lexicon::with_reserved();
        let mut chars = Lexicon::with_reserved();
        let mut pos = Lexicon::with_reserved();
        let mut type_names = BTreeSet::new();
        for s in corpus {
            for t in &s.tokens {
                words.add(t);
                let mut buf = [0u8; 4];
                for ch in t.chars() {
                    chars.add(ch.encode_utf8(&mut buf));
                }
            }
            for p in s.pos_tags.iter().flatten() {
                pos.add(p);
            }
            for m in &s.entities {
                type_names.insert(m.label.as_str());
            }
        }
        let mut types = Lexicon::default();
        for t in type_names {
            types.add(t);
        }
        Vocabulary {
            words,
            chars,
            pos,
            types,
        }
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    /// Class index of the null ("not an entity") type.
    pub fn null_class(&self) -> usize {
        self.types.len()
    }

    pub fn type_name(&self, type_id: usize) -> Option<&str> {
        self.types.item(type_id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedVocab {
    format_version: u32,
    words: BTreeMap<String, usize>,
    chars: BTreeMap<String, usize>,
    pos: BTreeMap<String, usize>,
    types: BTreeMap<String, usize>,
}

impl From<Vocabulary> for SavedVocab {
    fn from(v: Vocabulary) -> Self {
        SavedVocab {
            format_version: VOCAB_FORMAT_VERSION,
            words: v.words.to_map(),
            chars: v.chars.to_map(),
            pos: v.pos.to_map(),
            types: v.types.to_map(),
        }
    }
}

impl TryFrom<SavedVocab> for Vocabulary {
    type Error = Error;

    fn try_from(s: SavedVocab) -> Result<Self> {
        if s.format_version != VOCAB_FORMAT_VERSION {
            return Err(Error::Version {
                found: s.format_version,
                expected: VOCAB_FORMAT_VERSION,
            });
        }
        Ok(Vocabulary {
            words: Lexicon::from_map("word", s.words)?,
            chars: Lexicon::from_map("char", s.chars)?,
            pos: Lexicon::from_map("pos", s.pos)?,
            types: Lexicon::from_map("type", s.types)?,
        })
    }
}

/// Gold mention in model coordinates: inclusive token boundaries
/// `left = start`, `right = start + length - 1`, and a type index below
/// the null class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Entity {
    pub start: usize,
    pub length: usize,
    pub type_id: usize,
}

impl Entity {
    pub fn left(&self) -> usize {
        self.start
    }

    pub fn right(&self) -> usize {
        self.start + self.length - 1
    }
}

/// A sentence mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSentence {
    pub word_ids: Vec<usize>,
    pub pos_ids: Vec<usize>,
    pub char_ids: Vec<Vec<usize>>,
    /// Gold mentions whose type is known to the vocabulary.
    pub entities: Vec<Entity>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.word_ids.is_empty()
    }
}

pub fn encode_sentence(s: &Sentence, vocab: &Vocabulary) -> EncodedSentence {
    let word_ids = s.tokens.iter().map(|t| vocab.words.id_or_unk(t)).collect();
    let pos_ids = match &s.pos_tags {
        Some(tags) => tags.iter().map(|p| vocab.pos.id_or_unk(p)).collect(),
        None => vec![PAD_ID; s.tokens.len()],
    };
    let char_ids = s
        .tokens
        .iter()
        .map(|t| {
            let mut buf = [0u8; 4];
            t.chars()
                .map(|ch| vocab.chars.id_or_unk(ch.encode_utf8(&mut buf)))
                .collect()
        })
        .collect();
    let mut entities: Vec<Entity> = s
        .entities
        .iter()
        .filter_map(|m| {
            vocab.types.get(&m.label).map(|type_id| Entity {
                start: m.start,
                length: m.length,
                type_id,
            })
        })
        .collect();
    entities.sort();
    EncodedSentence {
        word_ids,
        pos_ids,
        char_ids,
        entities,
    }
}
