//! Text encoding and the precomputed image-embedding corpus.

pub mod corpus;
pub mod text;
pub mod tokenizer;

pub use corpus::{load_corpus, parse_corpus, EmbeddingCorpus};
pub use text::{EncodedText, TextEncoder};
pub use tokenizer::{fnv1a64, tokenize, TokenSequence, UNK};
