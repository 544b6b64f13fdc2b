//! Token representations: concatenated context, word, POS and character
//! embeddings fed through a BiLSTM and projected to the model width.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::EncodedSentence;
use crate::error::{Error, Result};
use crate::numerics::{BiLstm, Embedding, Graph, Linear, Matrix, ParameterStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub word_dim: usize,
    pub pos_dim: usize,
    /// Width of both the character embeddings and the per-token character
    /// vector (half from each LSTM direction); must be even.
    pub char_dim: usize,
    /// Width of the per-word context slot (learned table or sidecar vectors).
    pub context_dim: usize,
    pub d_model: usize,
    pub lstm_hidden: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("word_dim", self.word_dim),
            ("pos_dim", self.pos_dim),
            ("char_dim", self.char_dim),
            ("context_dim", self.context_dim),
            ("d_model", self.d_model),
            ("lstm_hidden", self.lstm_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.char_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("char_dim must be even, got {}", self.char_dim)));
        }
        Ok(())
    }

    pub fn embedding_width(&self) -> usize {
        self.context_dim + self.word_dim + self.pos_dim + self.char_dim
    }
}

/// Table sizes the encoder's lookups need.
#[derive(Clone, Copy, Debug)]
pub struct TableSizes {
    pub words: usize,
    pub chars: usize,
    pub pos: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    context: Embedding,
    words: Embedding,
    pos: Embedding,
    chars: Embedding,
    char_lstm: BiLstm,
    lstm: BiLstm,
    projection: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        config: &EncoderConfig,
        sizes: TableSizes,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let c = config;
        Ok(Encoder {
            config: c.clone(),
            context: Embedding::new(store, "encoder.context", sizes.words, c.context_dim, rng)?,
            words: Embedding::new(store, "encoder.word", sizes.words, c.word_dim, rng)?,
            pos: Embedding::new(store, "encoder.pos", sizes.pos, c.pos_dim, rng)?,
            chars: Embedding::new(store, "encoder.char", sizes.chars, c.char_dim, rng)?,
            char_lstm: BiLstm::new(store, "encoder.char_lstm", c.char_dim, c.char_dim / 2, rng)?,
            lstm: BiLstm::new(store, "encoder.lstm", c.embedding_width(), c.lstm_hidden, rng)?,
            projection: Linear::new(store, "encoder.proj", 2 * c.lstm_hidden, c.d_model, rng)?,
        })
    }

    pub fn attach(store: &ParameterStore, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Encoder {
            config: config.clone(),
            context: Embedding::attach(store, "encoder.context")?,
            words: Embedding::attach(store, "encoder.word")?,
            pos: Embedding::attach(store, "encoder.pos")?,
            chars: Embedding::attach(store, "encoder.char")?,
            char_lstm: BiLstm::attach(store, "encoder.char_lstm")?,
            lstm: BiLstm::attach(store, "encoder.lstm")?,
            projection: Linear::attach(store, "encoder.proj")?,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// `N × embedding_width` rows `[context; word; pos; char]`. When
    /// `context` is given it replaces the learned context table and must be
    /// `N × context_dim`.
    pub fn embed_tokens(&self, g: &mut Graph, sentence: &EncodedSentence, context: Option<&Matrix>) -> Result<Var> {
        let n = sentence.len();
        if n == 0 {
            return Err(Error::InvalidArgument("cannot encode an empty sentence".into()));
        }
        let store = g.store();
        for (what, ids, table) in [
            ("word", &sentence.word_ids, &self.words),
            ("pos", &sentence.pos_ids, &self.pos),
        ] {
            if let Some(&bad) = ids.iter().find(|&&id| id >= table.entries(store)) {
                return Err(Error::InvalidArgument(format!("{what} id {bad} out of range")));
            }
        }
        let ctx = match context {
            Some(m) => {
                if m.shape() != (n, self.config.context_dim) {
                    return Err(Error::Data(format!(
                        "context vectors are {}x{}, expected {n}x{}",
                        m.rows(),
                        m.cols(),
                        self.config.context_dim
                    )));
                }
                g.input(m.clone())
            }
            None => self.context.forward(g, &sentence.word_ids),
        };
        let words = self.words.forward(g, &sentence.word_ids);
        let pos = self.pos.forward(g, &sentence.pos_ids);
        let chars = self.char_vectors(g, &sentence.char_ids)?;
        Ok(g.concat_cols(&[ctx, words, pos, chars]))
    }

    /// Final character-BiLSTM states per token; zero for empty tokens.
    /// Tokens of equal character length run as one batch.
    fn char_vectors(&self, g: &mut Graph, char_ids: &[Vec<usize>]) -> Result<Var> {
        let n_chars = self.chars.entries(g.store());
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, ids) in char_ids.iter().enumerate() {
            if let Some(&bad) = ids.iter().find(|&&id| id >= n_chars) {
                return Err(Error::InvalidArgument(format!("char id {bad} out of range")));
            }
            by_len.entry(ids.len()).or_default().push(i);
        }
        let mut blocks = Vec::new();
        let mut order = Vec::with_capacity(char_ids.len());
        for (&len, tokens) in &by_len {
            if len == 0 {
                blocks.push(g.input(Matrix::zeros(tokens.len(), self.config.char_dim)));
            } else {
                let ids: Vec<usize> = (0..len)
                    .flat_map(|t| tokens.iter().map(move |&tok| char_ids[tok][t]))
                    .collect();
                let emb = self.chars.forward(g, &ids);
                blocks.push(self.char_lstm.final_states(g, emb, len, tokens.len())?);
            }
            order.extend_from_slice(tokens);
        }
        let stacked = if blocks.len() == 1 {
            blocks[0]
        } else {
            g.concat_rows(&blocks)
        };
        // row r of `stacked` belongs to token order[r]
        let mut position = vec![0; order.len()];
        for (r, &tok) in order.iter().enumerate() {
            position[tok] = r;
        }
        if position.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(stacked);
        }
        Ok(g.gather_rows(stacked, &position))
    }

    /// BiLSTM over the embedded tokens, projected to `d_model`.
    pub fn encode(&self, g: &mut Graph, embedded: Var) -> Result<Var> {
        let states = self.lstm.forward_sequence(g, embedded)?;
        self.projection.forward(g, states)
    }
}

#[derive(Deserialize)]
struct ContextRecord {
    vectors: Vec<Vec<f64>>,
}

/// Reads a sidecar of precomputed context vectors, one JSON object per
/// sentence: `{"vectors": [[...], ...]}` with one row per token.
pub fn load_context_vectors(path: impl AsRef<Path>) -> Result<Vec<Matrix>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let load_err = |message: String| Error::Load {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: ContextRecord = serde_json::from_str(&line).map_err(|e| load_err(e.to_string()))?;
        let m = Matrix::from_rows(&rec.vectors).map_err(|e| load_err(e.to_string()))?;
        if !m.is_finite() {
            return Err(load_err("context vectors must be finite".into()));
        }
        out.push(m);
    }
    Ok(out)
}
