//! Synthetic nested-entity corpora.
//!
//! Every entity type owns a few marker words. A single-token entity is one
//! of its type's singleton words; a longer entity opens with one of the
//! type's opener words and closes with one of its closer words. Interior
//! positions hold filler words or a nested entity of a different type, so
//! mentions are recoverable from surface tokens alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Mention, Sentence};
use crate::error::{Error, Result};

const TYPE_NAMES: [&str; 7] = ["PER", "ORG", "LOC", "GPE", "FAC", "VEH", "WEA"];
const FILLER_TAGS: [&str; 4] = ["DT", "VB", "IN", "JJ"];
const MARKERS_PER_TYPE: usize = 3;
const ENTITY_RATE: f64 = 0.3;
const LENGTH_DECAY: f64 = 0.65;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sentences: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub types: usize,
    /// Target fraction of mentions strictly inside another mention.
    pub nesting_ratio: f64,
    pub max_entity_len: usize,
    pub max_sentence_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sentences: 1000,
            vocab_size: 200,
            types: 3,
            nesting_ratio: 0.4,
            max_entity_len: 8,
            max_sentence_len: 20,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("sentences", self.sentences),
            ("vocab_size", self.vocab_size),
            ("types", self.types),
            ("max_entity_len", self.max_entity_len),
            ("max_sentence_len", self.max_sentence_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.nesting_ratio) {
            return Err(Error::Config(format!(
                "nesting_ratio {} outside [0, 1]",
                self.nesting_ratio
            )));
        }
        if self.max_entity_len > self.max_sentence_len {
            return Err(Error::Config(format!(
                "max_entity_len {} exceeds max_sentence_len {}",
                self.max_entity_len, self.max_sentence_len
            )));
        }
        Ok(())
    }

    pub fn min_sentence_len(&self) -> usize {
        (self.max_sentence_len / 2)
            .max(self.max_entity_len)
            .min(self.max_sentence_len)
    }
}

/// Name of entity type `index` in generated corpora.
pub fn type_name(index: usize) -> String {
    TYPE_NAMES
        .get(index)
        .map_or_else(|| format!("T{index}"), |s| s.to_string())
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Sentence>> {
    cfg.validate()?;
    let mut gen = Generator {
        cfg,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        nested: 0,
        total: 0,
    };
    Ok((0..cfg.sentences).map(|_| gen.sentence()).collect())
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    rng: ChaCha8Rng,
    nested: usize,
    total: usize,
}

struct Draft {
    tokens: Vec<String>,
    pos: Vec<String>,
    entities: Vec<Mention>,
}

impl Draft {
    fn push(&mut self, token: String, tag: &str) {
        self.tokens.push(token);
        self.pos.push(tag.to_string());
    }
}

impl Generator<'_> {
    fn sentence(&mut self) -> Sentence {
        let n = self
            .rng
            .gen_range(self.cfg.min_sentence_len()..=self.cfg.max_sentence_len);
        let mut draft = Draft {
            tokens: Vec::with_capacity(n),
            pos: Vec::with_capacity(n),
            entities: Vec::new(),
        };
        while draft.tokens.len() < n {
            let remaining = n - draft.tokens.len();
            if self.rng.gen_bool(ENTITY_RATE) {
                let ty = self.rng.gen_range(0..self.cfg.types);
                let max_len = remaining.min(self.cfg.max_entity_len);
                self.entity(&mut draft, max_len, ty, false);
            } else {
                self.filler(&mut draft);
            }
        }
        Sentence {
            tokens: draft.tokens,
            pos_tags: Some(draft.pos),
            entities: draft.entities,
        }
    }

    /// Nest when adding one more contained mention (plus its container)
    /// keeps the running ratio at or below the target.
    fn should_nest(&self) -> bool {
        (self.nested + 1) as f64 / (self.total + 2) as f64 <= self.cfg.nesting_ratio
    }

    fn sample_length(&mut self, min: usize, max: usize) -> usize {
        let weights: Vec<f64> = (min..=max).map(|l| LENGTH_DECAY.powi(l as i32 - 1)).collect();
        let mut x = self.rng.gen::<f64>() * weights.iter().sum::<f64>();
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                return min + i;
            }
            x -= w;
        }
        max
    }

    fn filler(&mut self, draft: &mut Draft) {
        let w = self.rng.gen_range(0..self.cfg.vocab_size);
        draft.push(format!("w{w}"), FILLER_TAGS[w % FILLER_TAGS.len()]);
    }

    fn marker(&mut self, ty: usize, kind: char) -> String {
        let j = self.rng.gen_range(0..MARKERS_PER_TYPE);
        format!("{}_{kind}{j}", type_name(ty).to_lowercase())
    }

    fn entity(&mut self, draft: &mut Draft, max_len: usize, ty: usize, inside: bool) {
        let nest = max_len >= 3 && self.should_nest();
        let length = if nest {
            self.sample_length(3, max_len)
        } else {
            self.sample_length(1, max_len)
        };
        let start = draft.tokens.len();
        draft.entities.push(Mention::new(start, length, type_name(ty)));
        self.total += 1;
        if inside {
            self.nested += 1;
        }

        if length == 1 {
            let word = self.marker(ty, 's');
            draft.push(word, "NNP");
            return;
        }
        let open = self.marker(ty, 'b');
        draft.push(open, "NNP");
        let interior = length - 2;
        if nest {
            let child_ty = if self.cfg.types > 1 {
                (ty + self.rng.gen_range(1..self.cfg.types)) % self.cfg.types
            } else {
                ty
            };
            let child_max = interior;
            // the child picks its own length; place it by padding around it
            let before_target = self.rng.gen_range(0..interior);
            let child_start = draft.tokens.len();
            let mut child = Draft {
                tokens: Vec::new(),
                pos: Vec::new(),
                entities: Vec::new(),
            };
            self.entity(&mut child, child_max, child_ty, true);
            let child_len = child.tokens.len();
            let before = before_target.min(interior - child_len);
            for _ in 0..before {
                self.filler(draft);
            }
            let offset = child_start + before;
            draft.tokens.extend(child.tokens);
            draft.pos.extend(child.pos);
            draft.entities.extend(child.entities.into_iter().map(|mut m| {
                m.start += offset;
                m
            }));
            for _ in 0..interior - child_len - before {
                self.filler(draft);
            }
        } else {
            for _ in 0..interior {
                self.filler(draft);
            }
        }
        let close = self.marker(ty, 'e');
        draft.push(close, "NNP");
    }
}
