//! Corpus files, vocabularies, and synthetic corpora.

mod corpus;
mod synth;
mod vocab;

pub use corpus::{load_corpus, nesting_ratio, read_corpus, write_corpus, Mention, Sentence};
pub use synth::{generate_synthetic, type_name, SynthConfig};
pub use vocab::{encode_sentence, EncodedSentence, Entity, Lexicon, Vocabulary, PAD_ID, UNK_ID, VOCAB_FORMAT_VERSION};
