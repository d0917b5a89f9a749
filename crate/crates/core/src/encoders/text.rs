//! Desk-scale trainable text encoder producing word features and a CLS vector.

use rand_chacha::ChaCha8Rng;

use crate::encoders::tokenizer::{tokenize, TokenSequence};
use crate::error::{Error, Result};
use crate::numerics::{AttentionBlock, Var};
use crate::params::{init_normal, Graph, ParamGroup, ParamId, ParamStore};

/// Token embeddings, learned positions, a learned CLS seed and one
/// self-attention block.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embedding: ParamId,
    pub positional: ParamId,
    pub cls_seed: ParamId,
    pub attn: AttentionBlock,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub dim: usize,
}

/// Word-level features (`n × d_q`) and the global CLS row (`1 × d_q`).
#[derive(Debug, Clone, Copy)]
pub struct EncodedText {
    pub words: Var,
    pub cls: Var,
    pub truncated: bool,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        vocab_size: usize,
        max_seq: usize,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if max_seq == 0 {
            return Err(Error::Config("max_seq must be at least 1".into()));
        }
        let g = ParamGroup::Backbone;
        let embedding = store.register("text.embedding", g, init_normal(rng, vocab_size, dim, 1.0))?;
        let positional = store.register("text.positional", g, init_normal(rng, max_seq + 1, dim, 0.1))?;
        let cls_seed = store.register("text.cls_seed", g, init_normal(rng, 1, dim, 1.0))?;
        let attn = AttentionBlock::new(store, "text.attn", dim, heads, g, rng)?;
        Ok(Self {
            embedding,
            positional,
            cls_seed,
            attn,
            vocab_size,
            max_seq,
            dim,
        })
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut t = tokenize(text, self.vocab_size);
        if t.ids.len() > self.max_seq {
            t.ids.truncate(self.max_seq);
            t.truncated = true;
        }
        t
    }

    pub fn encode_text(&self, g: &mut Graph<'_>, tokens: &TokenSequence) -> Result<EncodedText> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        if let Some(bad) = tokens.ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let truncated = tokens.truncated || tokens.len() > self.max_seq;
        let n = tokens.len().min(self.max_seq);
        let ids: Vec<usize> = tokens.ids[..n].iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..=n).collect();

        let table = g.param(self.embedding);
        let pos_table = g.param(self.positional);
        let seed = g.param(self.cls_seed);
        let emb = g.gather_rows(table, &ids)?;
        let pos = g.gather_rows(pos_table, &positions)?;
        let seed_and_words = g.concat_rows(&[seed, emb])?;
        let x = g.add(seed_and_words, pos)?;
        let out = self.attn.forward(g, x, x, x)?;
        let cls = g.slice_rows(out, 0, 1)?;
        let words = g.slice_rows(out, 1, n)?;
        Ok(EncodedText {
            words,
            cls,
            truncated,
        })
    }

    /// Tokenize then encode.
    pub fn encode(&self, g: &mut Graph<'_>, text: &str) -> Result<EncodedText> {
        let t = self.tokenize(text);
        self.encode_text(g, &t)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::encoders::tokenizer::UNK;

    fn encoder(max_seq: usize) -> (ParamStore, TextEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        let e = TextEncoder::new(&mut s, 64, max_seq, 8, 2, &mut rng).unwrap();
        (s, e)
    }

    #[test]
    fn single_token_shapes() {
        let (s, e) = encoder(16);
        let mut g = Graph::inference(&s);
        let out = e.encode(&mut g, "dog").unwrap();
        assert_eq!(g.shape(out.words), (1, 8));
        assert_eq!(g.shape(out.cls), (1, 8));
        let out = e.encode_text(&mut g, &TokenSequence { ids: vec![UNK], truncated: false }).unwrap();
        assert_eq!(g.shape(out.words), (1, 8));
    }

    #[test]
    fn identical_texts_identical_outputs() {
        let (s, e) = encoder(16);
        let mut g = Graph::inference(&s);
        let a = e.encode(&mut g, "a red car on the street").unwrap();
        let b = e.encode(&mut g, "a red car on the street").unwrap();
        assert_eq!(g.value(a.words), g.value(b.words));
        assert_eq!(g.value(a.cls), g.value(b.cls));
        assert_eq!(g.shape(a.words).0, 6);
    }

    #[test]
    fn long_input_truncates_and_flags() {
        let (s, e) = encoder(4);
        let mut g = Graph::inference(&s);
        let out = e.encode(&mut g, "one two three four five six").unwrap();
        assert!(out.truncated);
        assert_eq!(g.shape(out.words), (4, 8));
        let raw = tokenize("one two three four five six", 64);
        let out = e.encode_text(&mut g, &raw).unwrap();
        assert!(out.truncated);
        assert_eq!(g.shape(out.words), (4, 8));
    }

    #[test]
    fn out_of_vocab_id_rejected() {
        let (s, e) = encoder(4);
        let mut g = Graph::inference(&s);
        let t = TokenSequence { ids: vec![64], truncated: false };
        assert!(e.encode_text(&mut g, &t).is_err());
    }
}
